"""End-to-end training checks at full default settings; deselected by default, run with ``pytest -m slow``."""

from __future__ import annotations

import csv
from typing import TYPE_CHECKING

import numpy as np
import pytest

from kippo import diffcore as dc
from kippo._enums import CellStatusEnum, EnvNameEnum, ExitCode
from kippo.cli import main
from kippo.config import TrainConfig
from kippo.experiments import ABLATION_COMBOS, MANIFEST_FILE, ExperimentManifest
from kippo.koopman import decode_state, encode_state, predict_latent_sequence
from kippo.metrics import ABLATION_COLUMNS, MetricsLog, quartile_means
from kippo.rollout import RolloutCursor, collect_rollout
from kippo.trainer import Trainer, train

if TYPE_CHECKING:
    from pathlib import Path

pytestmark = pytest.mark.slow

SEEDS = (1, 2, 3, 4)


def default_config(env: EnvNameEnum, *, kippo: bool = True, seed: int = 1, total_steps: int = 300_000) -> TrainConfig:
    config = TrainConfig()
    config.env.name = env
    config.run.kippo = kippo
    config.run.seed = seed
    config.run.total_steps = total_steps
    return config


@pytest.fixture(scope="module")
def pendulum_logs() -> dict[str, list[MetricsLog]]:
    return {
        method: [train(default_config(EnvNameEnum.pendulum, kippo=method == "kippo", seed=seed)).log for seed in SEEDS]
        for method in ("kippo", "ppo")
    }


def test_plain_ppo_balances_cartpole() -> None:
    solved = 0
    for seed in SEEDS:
        log = train(default_config(EnvNameEnum.cartpole, kippo=False, seed=seed)).log
        solved += int(np.nanmax(log.column("episodic_return_mean")) >= 400.0)
    assert solved >= 3


def test_kippo_is_not_worse_than_ppo_on_pendulum(pendulum_logs: dict[str, list[MetricsLog]]) -> None:
    kippo = np.mean([log.final_ewma for log in pendulum_logs["kippo"]])
    ppo = np.mean([log.final_ewma for log in pendulum_logs["ppo"]])
    assert kippo >= ppo - 0.1 * abs(ppo)


def test_prediction_error_falls_on_every_seed(pendulum_logs: dict[str, list[MetricsLog]]) -> None:
    for seed, log in zip(SEEDS, pendulum_logs["kippo"], strict=True):
        early, late = quartile_means(log.column("cte"))
        assert late < early, f"seed {seed}"


def test_representation_losses_fall(pendulum_logs: dict[str, list[MetricsLog]]) -> None:
    for seed, log in zip(SEEDS, pendulum_logs["kippo"], strict=True):
        total = log.column("L_rec") + log.column("L_ls") + log.column("L_ss")
        early, late = quartile_means(total)
        assert late < early, f"seed {seed}"


def test_learned_model_predicts_linearizable_system() -> None:
    config = default_config(EnvNameEnum.linpoly, total_steps=200_000)
    config.koopman.latent_dim = 8
    trainer = Trainer(config)
    trainer.run()
    model = trainer.model
    assert model is not None

    # held-out on-policy windows from fresh streams
    env_rng, action_rng = np.random.default_rng(10_001), np.random.default_rng(10_002)
    buffer = collect_rollout(
        trainer.env,
        model,
        trainer.policy,
        trainer.value_fn,
        config.rollout.num_steps,
        config.koopman.horizon,
        cursor=RolloutCursor.start(trainer.env, env_rng),
        env_rng=env_rng,
        action_rng=action_rng,
        gamma=config.ppo.gamma,
    )
    full = buffer.full_window_indices()
    assert full.size > 0
    windows, actions = buffer.state_windows[full], buffer.action_windows[full]
    with dc.no_grad():
        batch = predict_latent_sequence(model, encode_state(model, dc.Tensor(windows[:, 0, :])), dc.Tensor(actions))
        predicted = decode_state(model, batch.predicted_latents).data
    assert np.mean((predicted - windows[:, 1:, :]) ** 2) <= 1e-3


def test_ablation_grid_on_pendulum(tmp_path: Path) -> None:
    argv = ["--output-root", str(tmp_path), "ablate", "--seeds", "1", "2", "--total-steps", "50000", "--parallel", "2"]
    assert main(argv) == ExitCode.ok
    root = tmp_path / "ablate" / "pendulum"
    manifest = ExperimentManifest.load(root / MANIFEST_FILE)
    assert len(manifest.cells) == 16
    assert all(cell.status is CellStatusEnum.done for cell in manifest.cells)

    with (root / "ablation.csv").open(newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == list(ABLATION_COLUMNS)
    assert [row[1] for row in rows[1:]] == [combo for combo, _ in ABLATION_COMBOS]
    assert all(row[2] != "" for row in rows[1:])
    assert (root / "ablation.txt").exists()
