from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import pytest

from kippo.errors import PlotFormatError
from kippo.plots import plot_learning_curves, validate_svg

if TYPE_CHECKING:
    from pathlib import Path


@pytest.fixture
def curves() -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    steps = np.arange(1, 6) * 2048.0
    return {
        "kippo": (steps, np.linspace(-500, -200, 5), np.full(5, 30.0)),
        "ppo": (steps, np.linspace(-520, -260, 5), np.full(5, 45.0)),
    }


def test_writes_valid_svg(tmp_path: Path, curves: dict) -> None:
    path = plot_learning_curves(curves, tmp_path / "plots" / "curves.png", title="pendulum")
    assert path.suffix == ".svg"
    validate_svg(path)
    assert "kippo" in path.read_text()


def test_output_is_reproducible(tmp_path: Path, curves: dict) -> None:
    first = plot_learning_curves(curves, tmp_path / "a.svg")
    second = plot_learning_curves(curves, tmp_path / "b.svg")
    assert first.read_bytes() == second.read_bytes()


def test_empty_plot_is_still_svg(tmp_path: Path) -> None:
    validate_svg(plot_learning_curves({}, tmp_path / "empty.svg"))


@pytest.mark.parametrize(
    "text",
    [
        "<svg width='10'",
        "<html width='1' height='1'></html>",
        "<svg xmlns='http://www.w3.org/2000/svg'></svg>",
    ],
)
def test_rejects_malformed_files(tmp_path: Path, text: str) -> None:
    path = tmp_path / "bad.svg"
    path.write_text(text)
    with pytest.raises(PlotFormatError):
        validate_svg(path)


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(PlotFormatError):
        validate_svg(tmp_path / "none.svg")
