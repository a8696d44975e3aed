"""
Multi-run experiments: seed comparisons, loss-term ablations and hyperparameter sweeps.

An experiment is a manifest of cells. Every cell is one training run identified by a
unique relative directory under the manifest's output root and fully described by the
base config text, the cell's overrides and its seed. The manifest is written next to the
results and records each cell's status, so an interrupted experiment resumes by running
only the cells that are not ``done``.
"""

from __future__ import annotations

import contextlib
import itertools
import json
import logging
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

from ._enums import CellStatusEnum, LossTermEnum, MethodEnum
from .config import apply_override, config_from_ini, validate
from .errors import ConfigError, KippoError, MissingRunsError
from .metrics import MetricsLog, RunResult, SeedAggregate, standardize
from .trainer import ABORT_FILE, CONFIG_FILE, METRICS_FILE, TRAJECTORY_FILE, train

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator, Mapping, Sequence

    from ._types import CellTyped, ManifestTyped
    from .config import TrainConfig

__all__ = (
    "ABLATION_COMBOS",
    "Cell",
    "ExperimentManifest",
    "ablation_cells",
    "attach_run_log",
    "baseline_aggregates",
    "build_cell_config",
    "compare_cells",
    "execute",
    "load_results",
    "parse_axis",
    "run_cell",
    "sweep_cells",
    "sweep_rows",
)

_logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
RUN_LOG_FILE = "train.log"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

BASELINE_COMBO = "baseline"
ABLATION_COMBOS: tuple[tuple[str, frozenset[LossTermEnum]], ...] = (
    (BASELINE_COMBO, frozenset()),
    *(
        ("+".join(term.value for term in subset), frozenset(subset))
        for size in (1, 2, 3)
        for subset in itertools.combinations(LossTermEnum, size)
    ),
)


@dataclass
class Cell:
    id: str
    group: str
    seed: int
    overrides: list[str] = field(default_factory=list)
    status: CellStatusEnum = CellStatusEnum.pending

    def to_dict(self) -> CellTyped:
        return {"id": self.id, "group": self.group, "seed": self.seed, "overrides": list(self.overrides),
                "status": str(self.status)}

    @classmethod
    def from_dict(cls, data: CellTyped) -> Cell:
        return cls(data["id"], data["group"], int(data["seed"]), list(data["overrides"]), CellStatusEnum(data["status"]))


@dataclass
class ExperimentManifest:
    """
    Attributes
    -----------
    output_root: :class:`str`
        Directory holding one sub-directory per cell and the manifest itself.
    base_config: :class:`str`
        INI text every cell starts from.
    parallelism: :class:`int`
        Maximum number of cells run at once.
    cells: :class:`list[Cell]`
        Unique by ``id``.
    """

    output_root: str
    base_config: str
    parallelism: int = field(default_factory=lambda: os.cpu_count() or 1)
    cells: list[Cell] = field(default_factory=list)

    def __post_init__(self) -> None:
        duplicates = sorted(cell_id for cell_id, count in Counter(cell.id for cell in self.cells).items() if count > 1)
        if duplicates:
            raise ConfigError(f"Manifest cell ids must be unique: {', '.join(duplicates)}.")
        if self.parallelism < 1:
            raise ConfigError(f"Manifest parallelism must be at least 1, got {self.parallelism}.")

    @property
    def root(self) -> Path:
        return Path(self.output_root)

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_FILE

    def cell_dir(self, cell: Cell) -> Path:
        return self.root / cell.id

    def group(self, name: str) -> list[Cell]:
        return [cell for cell in self.cells if cell.group == name]

    def to_dict(self) -> ManifestTyped:
        return {
            "output_root": self.output_root,
            "base_config": self.base_config,
            "parallelism": self.parallelism,
            "cells": [cell.to_dict() for cell in self.cells],
        }

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(MANIFEST_FILE + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.path)

    @classmethod
    def load(cls, path: Path) -> ExperimentManifest:
        """
        Raises
        -------
        :exc:`ConfigError`
            The manifest is missing or malformed.
        """
        try:
            data: ManifestTyped = json.loads(path.read_text(encoding="utf-8"))
            cells = [Cell.from_dict(item) for item in data["cells"]]
            return cls(data["output_root"], data["base_config"], int(data["parallelism"]), cells)
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"Cannot read manifest {path}: {exc}") from exc

    def merge_previous(self) -> None:
        """Carry over statuses from a manifest already on disk with the same base config and cells."""
        if not self.path.exists():
            return
        loaded = ExperimentManifest.load(self.path)
        if loaded.base_config != self.base_config:
            _logger.warning("Base config changed since %s was written; every cell will run again.", self.path)
            return
        previous = {cell.id: cell for cell in loaded.cells}
        for cell in self.cells:
            old = previous.get(cell.id)
            if old is not None and old.overrides == cell.overrides and old.seed == cell.seed:
                cell.status = old.status


def _method_overrides(method: str) -> list[str]:
    return ["run.kippo=true" if MethodEnum(method) is MethodEnum.kippo else "run.kippo=false"]


def compare_cells(envs: Sequence[str], seeds: Sequence[int], methods: Sequence[str]) -> list[Cell]:
    """One cell per ``(env, method, seed)``; repeated methods map onto the same cells."""
    cells: dict[str, Cell] = {}
    for env, method, seed in itertools.product(envs, dict.fromkeys(methods), seeds):
        cell_id = f"{env}/{method}/seed{seed}"
        cells[cell_id] = Cell(cell_id, f"{env}/{method}", seed, [f"env.name={env}", *_method_overrides(method)])
    return list(cells.values())


def ablation_cells(env: str, seeds: Sequence[int], weights: tuple[float, float, float]) -> list[Cell]:
    """
    The eight loss-term combinations times ``seeds``; the first combination is plain PPO.

    A term that is switched on keeps its weight from ``weights`` (``w_rec, w_ls, w_ss``);
    a term that is off gets weight 0.
    """
    named = dict(zip(LossTermEnum, weights, strict=True))
    cells: list[Cell] = []
    for combo, terms in ABLATION_COMBOS:
        if not terms:
            overrides = _method_overrides(MethodEnum.ppo)
        else:
            overrides = _method_overrides(MethodEnum.kippo) + [
                f"koopman.w_{term.value}={named[term] if term in terms else 0.0}" for term in LossTermEnum
            ]
        cells.extend(
            Cell(f"{env}/{combo}/seed{seed}", f"{env}/{combo}", seed, [f"env.name={env}", *overrides]) for seed in seeds
        )
    return cells


def parse_axis(text: str) -> tuple[str, list[str]]:
    """``"koopman.horizon=1,4,8"`` -> ``("koopman.horizon", ["1", "4", "8"])``."""
    key, sep, values = text.partition("=")
    items = [value.strip() for value in values.split(",") if value.strip()]
    if not sep or "." not in key or not items:
        raise ConfigError(f"Sweep axis {text!r} must look like section.key=v1,v2,...")
    return key.strip(), items


def sweep_cells(axes: Mapping[str, Sequence[str]], seeds: Sequence[int], env: str | None = None) -> list[Cell]:
    """The Cartesian product of ``axes`` times ``seeds``."""
    keys = list(axes)
    cells: list[Cell] = []
    for values in itertools.product(*(axes[key] for key in keys)):
        label = "_".join(f"{key}-{value}" for key, value in zip(keys, values, strict=True)) or "default"
        overrides = [f"{key}={value}" for key, value in zip(keys, values, strict=True)]
        if env is not None:
            overrides.insert(0, f"env.name={env}")
        cells.extend(Cell(f"sweep/{label}/seed{seed}", f"sweep/{label}", seed, list(overrides)) for seed in seeds)
    return cells


def build_cell_config(manifest: ExperimentManifest, cell: Cell) -> TrainConfig:
    """The validated config of one cell: base text, then the cell's overrides, seed and directory."""
    config = config_from_ini(manifest.base_config)
    for override in cell.overrides:
        apply_override(config, override)
    config.run.seed = cell.seed
    config.run.output_dir = str(manifest.cell_dir(cell))
    validate(config)
    return config


@contextlib.contextmanager
def attach_run_log(run_dir: Path, level: int = logging.INFO) -> Iterator[None]:
    """Mirror this package's log records into ``run_dir/train.log`` for the duration of the block."""
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / RUN_LOG_FILE, mode="a", encoding="utf-8")
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    package_logger = logging.getLogger(__package__ or "kippo")
    previous = package_logger.level
    if previous == logging.NOTSET or previous > level:
        package_logger.setLevel(level)
    package_logger.addHandler(handler)
    try:
        yield
    finally:
        package_logger.removeHandler(handler)
        package_logger.setLevel(previous)
        handler.close()


def run_cell(manifest: ExperimentManifest, cell: Cell, log_level: int = logging.INFO) -> tuple[str, CellStatusEnum, str | None]:
    """
    Train one cell from scratch; never raises.

    Returns
    --------
    :class:`tuple`
        ``(cell id, final status, error message or None)``.
    """
    run_dir = manifest.cell_dir(cell)
    for stale in (TRAJECTORY_FILE, ABORT_FILE, RUN_LOG_FILE):
        (run_dir / stale).unlink(missing_ok=True)
    try:
        config = build_cell_config(manifest, cell)
        with attach_run_log(run_dir, log_level):
            train(config, run_dir)
    except KippoError as exc:
        _logger.error("Cell %s failed: %s", cell.id, exc)
        return cell.id, CellStatusEnum.failed, str(exc)
    except Exception as exc:
        _logger.exception("Cell %s crashed", cell.id)
        return cell.id, CellStatusEnum.failed, f"{type(exc).__name__}: {exc}"
    return cell.id, CellStatusEnum.done, None


def execute(manifest: ExperimentManifest, log_level: int = logging.INFO) -> dict[str, str]:
    """
    Run every cell that is not ``done``, at most ``parallelism`` at a time.

    The manifest is rewritten after every finished cell. A failing cell is recorded as
    ``failed`` and its siblings keep running.

    Returns
    --------
    :class:`dict[str, str]`
        Error messages of the cells that failed, by cell id.
    """
    by_id = {cell.id: cell for cell in manifest.cells}
    pending = [cell for cell in manifest.cells if cell.status is not CellStatusEnum.done]
    skipped = len(manifest.cells) - len(pending)
    if skipped:
        _logger.info("Skipping %s completed cell(s) recorded in %s", skipped, manifest.path)
    manifest.save()
    failures: dict[str, str] = {}

    def record(cell_id: str, status: CellStatusEnum, error: str | None) -> None:
        by_id[cell_id].status = status
        if error is not None:
            failures[cell_id] = error
        manifest.save()
        _logger.info("Cell %s: %s", cell_id, status)

    workers = min(manifest.parallelism, len(pending))
    if workers <= 1:
        for cell in pending:
            record(*run_cell(manifest, cell, log_level))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_cell, manifest, cell, log_level) for cell in pending]
            for future in as_completed(futures):
                record(*future.result())
    return failures


def load_results(manifest: ExperimentManifest, cells: Iterable[Cell]) -> list[RunResult]:
    """
    Read the finished runs of ``cells``.

    Raises
    -------
    :exc:`MissingRunsError`
        Some cells are not ``done`` or their files are gone; all of them are listed.
    """
    cells = list(cells)
    missing = [
        cell.id
        for cell in cells
        if cell.status is not CellStatusEnum.done
        or not (manifest.cell_dir(cell) / METRICS_FILE).exists()
        or not (manifest.cell_dir(cell) / CONFIG_FILE).exists()
    ]
    if missing:
        raise MissingRunsError(missing)
    results: list[RunResult] = []
    for cell in cells:
        run_dir = manifest.cell_dir(cell)
        config = config_from_ini((run_dir / CONFIG_FILE).read_text(encoding="utf-8"))
        log = MetricsLog.read_csv(run_dir / METRICS_FILE)
        results.append(RunResult(str(config.env.name), str(config.method), config.run.seed, config.run.total_steps, log))
    return results


def baseline_aggregates(results: Iterable[RunResult]) -> dict[str, SeedAggregate]:
    """Final-EWMA aggregate per environment, used to standardize sweep returns."""
    grouped: dict[str, list[RunResult]] = {}
    for result in results:
        grouped.setdefault(result.env, []).append(result)
    return {
        env: SeedAggregate(tuple(r.final_ewma for r in sorted(runs, key=lambda r: r.seed)))
        for env, runs in sorted(grouped.items())
    }


def sweep_rows(
    cells: Sequence[Cell],
    results: Sequence[RunResult],
    axes: Sequence[str],
    baselines: Mapping[str, SeedAggregate] | None = None,
) -> list[dict[str, Any]]:
    """
    One row per sweep cell with its axis values, final EWMA and CTE.

    ``standardized_return`` is ``(final EWMA - PPO mean) / PPO SD`` of the cell's
    environment when a baseline is available, else empty.
    """
    rows: list[dict[str, Any]] = []
    for cell, result in zip(cells, results, strict=True):
        values = dict(override.split("=", 1) for override in cell.overrides)
        base = (baselines or {}).get(result.env)
        rows.append(
            {
                "group": cell.group,
                **{key: values.get(key) for key in axes},
                "seed": cell.seed,
                "env": result.env,
                "final_ewma": result.final_ewma,
                "final_cte": result.final_cte,
                "standardized_return": None if base is None else float(standardize([result.final_ewma], base)[0]),
            }
        )
    return rows
