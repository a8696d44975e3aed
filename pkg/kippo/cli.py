"""
Command line entry point.

Commands::

    kippo train --env pendulum --seed 1 --total-steps 50000
    kippo compare --env pendulum --seeds 1 2 3 4 --methods kippo ppo
    kippo ablate --env pendulum --seeds 1 2 --total-steps 50000
    kippo sweep --env pendulum --axis koopman.horizon=1,4,8 --seeds 1 2
    kippo plot runs/pendulum/kippo/seed1 runs/pendulum/ppo/seed1
    kippo validate-config my.ini

Every command accepts ``--set section.key=value`` overrides, applied after the config
file. Results go under ``--output-root``, which defaults to ``$KIPPO_OUTPUT_ROOT`` or
``runs``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import TYPE_CHECKING

from ._enums import EnvNameEnum, ExitCode, MethodEnum
from .config import config_from_ini, config_hash, config_to_ini, load_config
from .errors import CheckpointError, ConfigError, MissingRunsError, NonFiniteError
from .experiments import (
    ABLATION_COMBOS,
    LOG_FORMAT,
    ExperimentManifest,
    ablation_cells,
    attach_run_log,
    baseline_aggregates,
    compare_cells,
    execute,
    load_results,
    parse_axis,
    sweep_cells,
    sweep_rows,
)
from .metrics import (
    ABLATION_COLUMNS,
    COMPARISON_COLUMNS,
    MetricsLog,
    ablation_rows,
    aggregate_and_compare,
    learning_curve,
    render_table,
    write_rows_csv,
)
from .plots import plot_learning_curves, validate_svg
from .trainer import CONFIG_FILE, METRICS_FILE, Trainer

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .config import TrainConfig

__all__ = ("build_parser", "main")

_logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "KIPPO_OUTPUT_ROOT"


def _flag_overrides(args: argparse.Namespace) -> list[str]:
    """Turn the shortcut flags into overrides; explicit ``--set`` values come last and win."""
    overrides: list[str] = []
    if getattr(args, "env", None) and isinstance(args.env, str):
        overrides.append(f"env.name={args.env}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "total_steps", None) is not None:
        overrides.append(f"run.total_steps={args.total_steps}")
    if getattr(args, "kippo", None) is not None:
        overrides.append(f"run.kippo={args.kippo}")
    if getattr(args, "dump_trajectory", False):
        overrides.append("output.dump_trajectory=true")
    return [*overrides, *args.set]


def _log_level(args: argparse.Namespace) -> int:
    return getattr(logging, args.log_level)


def _base_config(args: argparse.Namespace) -> TrainConfig:
    return load_config(args.config, _flag_overrides(args))


def _write_table(rows: Sequence[dict], columns: Sequence[str], stem: Path) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    write_rows_csv(rows, columns, stem.with_suffix(".csv"))
    text = render_table(rows, columns)
    stem.with_suffix(".txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_train(args: argparse.Namespace, output_root: Path) -> ExitCode:
    level = _log_level(args)
    if args.resume is not None:
        run_dir = args.run_dir or args.resume.parent
        with attach_run_log(run_dir, level):
            trainer = Trainer.from_checkpoint(args.resume, run_dir)
            _logger.info("Resuming %r from %s", trainer, args.resume)
            result = trainer.run()
    else:
        config = _base_config(args)
        run_dir = args.run_dir or output_root / str(config.env.name) / str(config.method) / f"seed{config.run.seed}"
        config.run.output_dir = str(run_dir)
        with attach_run_log(run_dir, level):
            result = Trainer(config, run_dir).run()
    print(f"{run_dir / METRICS_FILE}: {len(result.log)} updates, final EWMA {result.log.final_ewma}")
    return ExitCode.ok


def cmd_compare(args: argparse.Namespace, output_root: Path) -> ExitCode:
    base = _base_config(args)
    root = output_root / "compare"
    manifest = ExperimentManifest(str(root), config_to_ini(base), args.parallel, compare_cells(args.env, args.seeds, args.methods))
    manifest.merge_previous()
    execute(manifest, _log_level(args))

    candidate, baseline = args.methods[0], args.methods[-1]
    rows = []
    for env in args.env:
        candidate_runs = load_results(manifest, manifest.group(f"{env}/{candidate}"))
        baseline_runs = load_results(manifest, manifest.group(f"{env}/{baseline}"))
        rows.extend(aggregate_and_compare(candidate_runs, baseline_runs, candidate, baseline))
        curves = {
            method: learning_curve([run.log for run in load_results(manifest, manifest.group(f"{env}/{method}"))])
            for method in dict.fromkeys(args.methods)
        }
        validate_svg(plot_learning_curves(curves, root / f"curves_{env}.svg", title=env))
    _write_table(rows, COMPARISON_COLUMNS, root / "comparison")
    return ExitCode.ok


def cmd_ablate(args: argparse.Namespace, output_root: Path) -> ExitCode:
    base = _base_config(args)
    root = output_root / "ablate" / args.env
    cells = ablation_cells(args.env, args.seeds, base.loss_weights)
    manifest = ExperimentManifest(str(root), config_to_ini(base), args.parallel, cells)
    manifest.merge_previous()
    execute(manifest, _log_level(args))
    results = {combo: load_results(manifest, manifest.group(f"{args.env}/{combo}")) for combo, _ in ABLATION_COMBOS}
    _write_table(ablation_rows(args.env, results), ABLATION_COLUMNS, root / "ablation")
    return ExitCode.ok


def cmd_sweep(args: argparse.Namespace, output_root: Path) -> ExitCode:
    if args.manifest is not None:
        manifest = ExperimentManifest.load(args.manifest)
    else:
        if not args.axis:
            raise ConfigError("sweep needs --manifest or at least one --axis section.key=v1,v2,...")
        base = _base_config(args)
        axes = dict(parse_axis(text) for text in args.axis)
        cells = sweep_cells(axes, args.seeds, args.env)
        if args.standardize:
            cells += compare_cells([str(base.env.name)], args.seeds, [MethodEnum.ppo])
        manifest = ExperimentManifest(str(output_root / "sweep"), config_to_ini(base), args.parallel, cells)
        manifest.merge_previous()
    failures = execute(manifest, _log_level(args))

    sweep = [cell for cell in manifest.cells if cell.group.startswith("sweep/") and cell.id not in failures]
    baseline = [cell for cell in manifest.cells if cell.group.endswith(f"/{MethodEnum.ppo}")]
    axes_keys = sorted(
        {o.split("=", 1)[0] for cell in sweep for o in cell.overrides} - {"env.name"}
    )
    baselines = baseline_aggregates(load_results(manifest, baseline)) if baseline else None
    rows = sweep_rows(sweep, load_results(manifest, sweep), axes_keys, baselines)
    columns = ["group", *axes_keys, "seed", "env", "final_ewma", "final_cte", "standardized_return"]
    write_rows_csv(rows, columns, manifest.root / "sweep.csv")
    print(render_table(rows, columns), end="")
    if failures:
        _logger.error("%s sweep cell(s) failed: %s", len(failures), ", ".join(sorted(failures)))
        return ExitCode.missing_inputs
    return ExitCode.ok


def cmd_plot(args: argparse.Namespace, output_root: Path) -> ExitCode:
    missing = [str(run) for run in args.runs if not (run / METRICS_FILE).exists() or not (run / CONFIG_FILE).exists()]
    if missing:
        raise MissingRunsError(missing)
    grouped: dict[str, list[MetricsLog]] = {}
    for run in args.runs:
        config = config_from_ini((run / CONFIG_FILE).read_text(encoding="utf-8"))
        grouped.setdefault(f"{config.env.name}/{config.method}", []).append(MetricsLog.read_csv(run / METRICS_FILE))
    curves = {label: learning_curve(logs, args.column) for label, logs in grouped.items()}
    path = plot_learning_curves(curves, args.out or output_root / f"curves_{args.column}.svg", ylabel=args.column)
    validate_svg(path)
    print(path)
    return ExitCode.ok


def cmd_validate_config(args: argparse.Namespace, output_root: Path) -> ExitCode:
    config = load_config(args.config, args.set)
    print(config_to_ini(config), end="")
    print(f"# hash {config_hash(config)}")
    return ExitCode.ok


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kippo", description="Koopman-inspired representation learning on PPO.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--output-root", type=Path, default=None, help=f"Defaults to ${OUTPUT_ROOT_ENV} or ./runs.")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser, *, multi_env: bool = False) -> None:
        sub.add_argument("--config", type=Path, default=None, help="INI config file.")
        sub.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="Config override.")
        sub.add_argument("--total-steps", type=int, default=None)
        env_choices = [e.value for e in EnvNameEnum]
        if multi_env:
            sub.add_argument("--env", nargs="+", default=[EnvNameEnum.pendulum.value], choices=env_choices)
        else:
            sub.add_argument("--env", default=None, choices=env_choices)

    def experiment(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4])
        sub.add_argument("--parallel", type=int, default=os.cpu_count() or 1, help="Maximum concurrent runs.")

    train = commands.add_parser("train", help="Train one run.")
    common(train)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--kippo", choices=["true", "false"], default=None, help="false trains plain PPO on raw states.")
    train.add_argument("--run-dir", type=Path, default=None)
    train.add_argument("--resume", type=Path, default=None, help="Continue from a checkpoint file.")
    train.add_argument("--dump-trajectory", action="store_true")
    train.set_defaults(handler=cmd_train)

    compare = commands.add_parser("compare", help="Multi-seed comparison against a baseline method.")
    common(compare, multi_env=True)
    experiment(compare)
    compare.add_argument("--methods", nargs="+", default=["kippo", "ppo"], choices=[m.value for m in MethodEnum])
    compare.set_defaults(handler=cmd_compare)

    ablate = commands.add_parser("ablate", help="Grid over loss-term combinations.")
    common(ablate)
    experiment(ablate)
    ablate.set_defaults(handler=cmd_ablate, env=EnvNameEnum.pendulum.value)

    sweep = commands.add_parser("sweep", help="Hyperparameter sweep.")
    common(sweep)
    experiment(sweep)
    sweep.add_argument("--manifest", type=Path, default=None, help="Run (or resume) an existing manifest.")
    sweep.add_argument("--axis", action="append", default=[], metavar="SECTION.KEY=V1,V2")
    sweep.add_argument("--standardize", action="store_true", help="Also run PPO baselines and standardize returns.")
    sweep.set_defaults(handler=cmd_sweep)

    plot = commands.add_parser("plot", help="Plot learning curves of finished runs.")
    plot.add_argument("runs", type=Path, nargs="+")
    plot.add_argument("--column", default="ewma", choices=list(MetricsLog.COLUMNS[1:]))
    plot.add_argument("--out", type=Path, default=None)
    plot.set_defaults(handler=cmd_plot)

    check = commands.add_parser("validate-config", help="Parse, validate and print a config.")
    check.add_argument("config", type=Path)
    check.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    check.set_defaults(handler=cmd_validate_config)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    output_root = args.output_root or Path(os.environ.get(OUTPUT_ROOT_ENV) or "runs")
    try:
        return int(args.handler(args, output_root))
    except (ConfigError, CheckpointError) as exc:
        _logger.error("%s", exc)
        return int(ExitCode.config_error)
    except NonFiniteError as exc:
        _logger.error("Run aborted: %s", exc)
        return int(ExitCode.runtime_abort)
    except MissingRunsError as exc:
        _logger.error("%s", exc)
        return int(ExitCode.missing_inputs)


if __name__ == "__main__":
    sys.exit(main())
