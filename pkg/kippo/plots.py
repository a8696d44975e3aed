"""Learning-curve plots written as standalone SVG files."""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from typing import TYPE_CHECKING

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import PlotFormatError

if TYPE_CHECKING:
    from collections.abc import Mapping
    from pathlib import Path

__all__ = ("plot_learning_curves", "validate_svg")

_logger = logging.getLogger(__name__)

Curve = tuple[np.ndarray, np.ndarray, np.ndarray]


def plot_learning_curves(
    curves: Mapping[str, Curve],
    path: Path,
    *,
    title: str = "",
    ylabel: str = "EWMA return",
) -> Path:
    """
    Draw one mean line with a +-SD band per label and save it as SVG.

    Parameters
    -----------
    curves: :class:`Mapping[str, tuple]`
        ``label -> (global_steps, mean, sd)`` as returned by :func:`kippo.metrics.learning_curve`.
    path: :class:`Path`
        Target file; the ``.svg`` suffix is enforced.

    Returns
    --------
    :class:`Path`
        The written file.
    """
    path = path.with_suffix(".svg")
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed element ids and no timestamp keep the file byte-identical across runs
    with plt.rc_context({"svg.hashsalt": "kippo", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for label, (steps, mean, sd) in curves.items():
            (line,) = ax.plot(steps, mean, label=label, linewidth=1.5)
            ax.fill_between(steps, mean - sd, mean + sd, color=line.get_color(), alpha=0.2, linewidth=0)
        ax.set_xlabel("environment steps")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.grid(True, alpha=0.3)
        if curves:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    _logger.info("Wrote plot %s", path)
    return path


def validate_svg(path: Path) -> None:
    """
    Check that ``path`` parses as XML with an ``<svg>`` root carrying a size.

    Raises
    -------
    :exc:`PlotFormatError`
        The file is missing, not XML, or not an SVG document.
    """
    try:
        root = ET.parse(path).getroot()
    except (OSError, ET.ParseError) as exc:
        raise PlotFormatError(f"{path} is not well-formed XML: {exc}") from exc
    if root.tag.rsplit("}", 1)[-1] != "svg":
        raise PlotFormatError(f"{path} has root element {root.tag!r}, expected svg.")
    if "width" not in root.attrib or "height" not in root.attrib:
        raise PlotFormatError(f"{path} does not declare its width and height.")
