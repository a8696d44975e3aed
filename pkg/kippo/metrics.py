"""
Evaluation metrics, the per-run metrics log and cross-seed reporting.

Percent differences against a baseline are signed so that positive means better:
``(new - old) / |old| * 100`` for means (higher return is better) and
``(1 - new / old) * 100`` for standard deviations (lower spread is better).
Standard deviations across seeds are sample standard deviations (``ddof=1``).
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, ClassVar, NamedTuple

import numpy as np

from ._enums import EwmaConventionEnum, MethodEnum
from .envs import ENVIRONMENTS
from .errors import BudgetMismatchError, ContractError, MissingRunsError, ShapeError

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence
    from pathlib import Path
    from typing import TextIO

    from ._types import AblationRowTyped, ComparisonRowTyped, MetricsRowTyped

__all__ = (
    "ABLATION_COLUMNS",
    "COMPARISON_COLUMNS",
    "MetricsLog",
    "RunResult",
    "SeedAggregate",
    "ablation_rows",
    "aggregate_and_compare",
    "cte",
    "cte_batch",
    "ewma_update",
    "learning_curve",
    "pct_diff_mean",
    "pct_diff_sd",
    "quartile_means",
    "render_table",
    "representation_drift",
    "standardize",
    "write_rows_csv",
)

COMPARISON_COLUMNS: tuple[str, ...] = ("env", "complexity", "method", "mean", "sd", "pct_mean", "pct_sd")
ABLATION_COLUMNS: tuple[str, ...] = ("env", "combo", "ewma_mean", "ewma_sd", "cte_mean", "cte_sd")


def ewma_update(
    prev: float | None, value: float, alpha: float, convention: EwmaConventionEnum = EwmaConventionEnum.printed
) -> float:
    """
    One step of the exponentially weighted moving average of episodic returns.

    Parameters
    -----------
    prev: :class:`float` | None
        The previous average; ``None`` before the first episode, in which case ``value`` is returned.
    value: :class:`float`
        The newest episodic return.
    alpha: :class:`float`
        Smoothing factor in ``[0, 1]``.
    convention: :class:`EwmaConventionEnum`, optional
        ``printed`` returns ``alpha * prev + (1 - alpha) * value``; ``swapped`` exchanges the weights.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"EWMA alpha must lie in [0, 1], got {alpha}.")
    if prev is None:
        return float(value)
    if EwmaConventionEnum(convention) is EwmaConventionEnum.swapped:
        return (1.0 - alpha) * prev + alpha * value
    return alpha * prev + (1.0 - alpha) * value


def cte(predicted: np.ndarray, truth: np.ndarray) -> float:
    """
    Cumulative trajectory error of one predicted sequence.

    ``e_k`` is the mean absolute error over state dimensions at step ``k``; the result is
    ``(1/H) sum_h (1/h) sum_{k<=h} e_k``.

    Parameters
    -----------
    predicted: :class:`numpy.ndarray`
        ``H x state_dim`` (or ``H`` for scalar states).
    truth: :class:`numpy.ndarray`
        Same shape as ``predicted``.

    Raises
    -------
    :exc:`ShapeError`
        The sequences differ in length or width, or are empty.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape or predicted.shape[0] == 0:
        raise ShapeError(f"CTE needs equal non-empty sequences, got {predicted.shape} and {truth.shape}.")
    errors = np.abs(predicted - truth).reshape(predicted.shape[0], -1).mean(axis=1)
    horizon = errors.shape[0]
    running = np.cumsum(errors) / np.arange(1, horizon + 1)
    return float(running.sum() / horizon)


def cte_batch(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Mean :func:`cte` over a ``batch x H x state_dim`` set of windows."""
    if np.shape(predicted) != np.shape(truth) or np.ndim(predicted) != 3:
        raise ShapeError(f"CTE batch needs equal 3-D arrays, got {np.shape(predicted)} and {np.shape(truth)}.")
    return float(np.mean([cte(p, t) for p, t in zip(predicted, truth, strict=True)]))


def representation_drift(before: np.ndarray, after: np.ndarray) -> float:
    """Mean absolute change of encoder outputs on the same probe batch."""
    if np.shape(before) != np.shape(after):
        raise ShapeError(f"Probe latents changed shape: {np.shape(before)} -> {np.shape(after)}.")
    return float(np.mean(np.abs(np.asarray(after) - np.asarray(before))))


def pct_diff_mean(new: float, old: float) -> float:
    if old == 0:
        return 0.0 if new == 0 else math.nan
    return (new - old) / abs(old) * 100.0


def pct_diff_sd(new: float, old: float) -> float:
    if old == 0:
        return 0.0 if new == 0 else math.nan
    return (1.0 - new / old) * 100.0


@dataclass(frozen=True)
class SeedAggregate:
    """
    Per-seed final values and their summary.

    Attributes
    -----------
    values: :class:`tuple[float, ...]`
        One value per seed, in seed order.
    """

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise ContractError("SeedAggregate needs at least one value.")

    @property
    def mean(self) -> float:
        return float(np.mean(np.asarray(self.values, dtype=np.float64)))

    @property
    def sd(self) -> float:
        """Sample standard deviation; ``0.0`` for a single seed."""
        if len(self.values) < 2:
            return 0.0
        return float(np.std(np.asarray(self.values, dtype=np.float64), ddof=1))


def standardize(values: Sequence[float] | np.ndarray, baseline: SeedAggregate) -> np.ndarray:
    """``(value - baseline mean) / baseline sd``; an affine map, so rankings are preserved."""
    scale = baseline.sd or 1.0
    return (np.asarray(values, dtype=np.float64) - baseline.mean) / scale


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(value: str) -> float | None:
    return None if value == "" else float(value)


@dataclass
class MetricsLog:
    """
    One row per policy update, in the fixed column order of :attr:`COLUMNS`.

    Empty cells mean "not applicable": representation columns in plain PPO runs, wall
    time when it is not recorded, returns before the first finished episode.
    """

    COLUMNS: ClassVar[tuple[str, ...]] = (
        "global_step",
        "episodic_return_mean",
        "ewma",
        "L_rec",
        "L_ls",
        "L_ss",
        "L_ppo_policy",
        "L_ppo_value",
        "entropy",
        "cte",
        "wall_time_s",
        "repr_drift",
        "clip_fraction",
    )

    rows: list[MetricsRowTyped] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: MetricsRowTyped) -> None:
        unknown = set(row) - set(self.COLUMNS)
        if unknown:
            raise ContractError(f"Unknown metrics column(s): {', '.join(sorted(unknown))}.")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        """Values of one column with empty cells as NaN."""
        if name not in self.COLUMNS:
            raise ContractError(f"Unknown metrics column {name!r}.")
        values = [row.get(name) for row in self.rows]
        return np.array([math.nan if v is None else float(v) for v in values], dtype=np.float64)

    @property
    def final_ewma(self) -> float | None:
        for row in reversed(self.rows):
            if row.get("ewma") is not None:
                return row["ewma"]
        return None

    def to_csv_text(self) -> str:
        buffer = io.StringIO()
        _write_rows(buffer, self.rows, self.COLUMNS)
        return buffer.getvalue()

    def write_csv(self, path: Path) -> None:
        path.write_text(self.to_csv_text(), encoding="utf-8")

    @classmethod
    def read_csv(cls, path: Path) -> MetricsLog:
        """
        Raises
        -------
        :exc:`ShapeError`
            The header is not the documented column order.
        """
        with path.open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = tuple(next(reader, ()))
            if header != cls.COLUMNS:
                raise ShapeError(f"{path} does not have the metrics header; found {header}.")
            log = cls()
            for record in reader:
                row: dict[str, Any] = {name: _parse(text) for name, text in zip(cls.COLUMNS, record, strict=True)}
                row["global_step"] = int(row["global_step"] or 0)
                log.rows.append(row)  # type: ignore[arg-type]
        return log


class RunResult(NamedTuple):
    """A finished run as seen by the aggregation step."""

    env: str
    method: str
    seed: int
    total_steps: int
    log: MetricsLog

    @property
    def final_ewma(self) -> float:
        value = self.log.final_ewma
        return math.nan if value is None else value

    @property
    def final_cte(self) -> float | None:
        """Mean CTE over the last quarter of updates; ``None`` when the run has no CTE."""
        column = self.log.column("cte")
        if column.size == 0 or np.all(np.isnan(column)):
            return None
        return quartile_means(column)[1]


def quartile_means(values: np.ndarray) -> tuple[float, float]:
    """NaN-ignoring means of the first and last quarter of a series (at least one element each)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ContractError("quartile_means needs a non-empty series.")
    quarter = max(values.size // 4, 1)
    return float(np.nanmean(values[:quarter])), float(np.nanmean(values[-quarter:]))


def _check_budgets(runs: Iterable[RunResult]) -> None:
    budgets: dict[str, set[int]] = defaultdict(set)
    for run in runs:
        budgets[run.env].add(run.total_steps)
    mixed = {env: sorted(steps) for env, steps in budgets.items() if len(steps) > 1}
    if mixed:
        raise BudgetMismatchError(f"Runs use different step budgets: {mixed}.")


def aggregate_and_compare(
    runs: Sequence[RunResult],
    baseline_runs: Sequence[RunResult],
    method: str = MethodEnum.kippo,
    baseline_method: str = MethodEnum.ppo,
) -> list[ComparisonRowTyped]:
    """
    Compare the final EWMA of ``runs`` against ``baseline_runs`` per environment.

    Each environment contributes the baseline row first (zero differences) and then the
    method row.

    Raises
    -------
    :exc:`BudgetMismatchError`
        Runs of one environment used different step budgets.
    :exc:`MissingRunsError`
        An environment has runs on one side only.
    """
    _check_budgets([*runs, *baseline_runs])
    grouped: dict[str, list[RunResult]] = defaultdict(list)
    baseline_grouped: dict[str, list[RunResult]] = defaultdict(list)
    for run in runs:
        grouped[run.env].append(run)
    for run in baseline_runs:
        baseline_grouped[run.env].append(run)
    missing = sorted(set(grouped) ^ set(baseline_grouped))
    if missing:
        raise MissingRunsError([f"{env}:{baseline_method if env in grouped else method}" for env in missing])

    rows: list[ComparisonRowTyped] = []
    for env in sorted(grouped):
        complexity = str(ENVIRONMENTS[env]().spec.complexity)
        base = SeedAggregate(tuple(r.final_ewma for r in sorted(baseline_grouped[env], key=lambda r: r.seed)))
        new = SeedAggregate(tuple(r.final_ewma for r in sorted(grouped[env], key=lambda r: r.seed)))
        rows.append(
            {"env": env, "complexity": complexity, "method": str(baseline_method),
             "mean": base.mean, "sd": base.sd, "pct_mean": 0.0, "pct_sd": 0.0}
        )
        rows.append(
            {"env": env, "complexity": complexity, "method": str(method), "mean": new.mean, "sd": new.sd,
             "pct_mean": pct_diff_mean(new.mean, base.mean), "pct_sd": pct_diff_sd(new.sd, base.sd)}
        )
    return rows


def ablation_rows(env: str, cells: Mapping[str, Sequence[RunResult]]) -> list[AblationRowTyped]:
    """
    One row per loss-term combination, in the mapping's order.

    CTE columns are ``None`` for combinations that never compute a CTE.
    """
    rows: list[AblationRowTyped] = []
    for combo, results in cells.items():
        ordered = sorted(results, key=lambda r: r.seed)
        ewma = SeedAggregate(tuple(r.final_ewma for r in ordered))
        ctes = [r.final_cte for r in ordered]
        present = tuple(c for c in ctes if c is not None)
        cte_agg = SeedAggregate(present) if present else None
        rows.append(
            {
                "env": env,
                "combo": combo,
                "ewma_mean": ewma.mean,
                "ewma_sd": ewma.sd,
                "cte_mean": cte_agg.mean if cte_agg else None,
                "cte_sd": cte_agg.sd if cte_agg else None,
            }
        )
    return rows


def learning_curve(logs: Sequence[MetricsLog], column: str = "ewma") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Mean and sample SD across seeds of one column, aligned on ``global_step``.

    Raises
    -------
    :exc:`BudgetMismatchError`
        The logs do not share the same update steps.
    """
    if not logs:
        raise ContractError("learning_curve needs at least one log.")
    steps = logs[0].column("global_step")
    for log in logs[1:]:
        if not np.array_equal(log.column("global_step"), steps):
            raise BudgetMismatchError("Learning curves must share the same update steps.")
    stacked = np.vstack([log.column(column) for log in logs])
    mean = np.nanmean(stacked, axis=0)
    sd = np.nanstd(stacked, axis=0, ddof=1) if stacked.shape[0] > 1 else np.zeros_like(mean)
    return steps, mean, sd


def _write_rows(handle: TextIO, rows: Iterable[Mapping[str, Any]], columns: Sequence[str]) -> None:
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows([_format(row.get(name)) for name in columns] for row in rows)


def write_rows_csv(rows: Sequence[Mapping[str, Any]], columns: Sequence[str], path: Path) -> None:
    with path.open("w", encoding="utf-8", newline="") as handle:
        _write_rows(handle, rows, columns)


def render_table(rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> str:
    """Fixed-width text table; floats are shown with two decimals, percentages signed."""

    def cell(name: str, value: Any) -> str:
        if value is None:
            return "-"
        if isinstance(value, float):
            if math.isnan(value):
                return "nan"
            return f"{value:+.2f}%" if name.startswith("pct_") else f"{value:.2f}"
        return str(value)

    body = [[cell(name, row.get(name)) for name in columns] for row in rows]
    widths = [max(len(name), *(len(line[i]) for line in body)) if body else len(name) for i, name in enumerate(columns)]
    header = "  ".join(name.ljust(width) for name, width in zip(columns, widths, strict=True))
    rule = "  ".join("-" * width for width in widths)
    lines = [header, rule]
    lines.extend("  ".join(text.rjust(width) for text, width in zip(line, widths, strict=True)) for line in body)
    return "\n".join(lines) + "\n"
