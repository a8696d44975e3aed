"""
The alternating rollout / optimization loop.

Each update collects one rollout with the current policy, then runs ``update_epochs``
passes over shuffled minibatches. Per minibatch the representation loss
``L_KI = w_rec L_rec + w_ls L_ls + w_ss L_ss`` and the PPO loss on detached latents are
summed and back-propagated once. The two losses touch disjoint parameter groups, each
with its own Adam instance and its own gradient-norm clip, so neither loss can move the
other's parameters.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, fields
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np

from . import diffcore as dc
from .agent import GaussianPolicy, PpoBatch, ValueFunction, ppo_loss
from .checkpoint import (
    FORMAT,
    VERSION,
    adam_from_doc,
    adam_to_doc,
    array_from_doc,
    params_from_doc,
    params_to_doc,
    read_checkpoint,
    tensor_doc,
    write_checkpoint,
)
from .config import config_from_ini, config_hash, config_to_ini, validate
from .envs import make_env
from .errors import CheckpointSchemaError, ContractError, NonFiniteError
from .koopman import (
    KoopmanModel,
    decode_state,
    encode_state,
    loss_latent_prediction,
    loss_reconstruction,
    loss_representation_total,
    loss_state_prediction,
    predict_latent_sequence,
)
from .metrics import MetricsLog, cte_batch, ewma_update, representation_drift
from .rng import RngStreams
from .rollout import RolloutCursor, actor_inputs, collect_rollout, compute_gae, dump_trajectory

if TYPE_CHECKING:
    from pathlib import Path

    from ._types import CheckpointTyped, MetricsRowTyped, TrainerStateTyped
    from .config import TrainConfig
    from .rollout import GaeOutput, RolloutBuffer

__all__ = (
    "EpochLosses",
    "TrainResult",
    "Trainer",
    "describe",
    "minibatch_indices",
    "train",
)

CHECKPOINT_FILE = "checkpoint.json"
METRICS_FILE = "metrics.csv"
CONFIG_FILE = "config.ini"
ABORT_FILE = "abort.json"
TRAJECTORY_FILE = "trajectories.csv"


@dataclass
class EpochLosses:
    """Minibatch means over one epoch; representation terms are ``None`` when they are not trained."""

    L_rec: float | None
    L_ls: float | None
    L_ss: float | None
    L_ppo_policy: float
    L_ppo_value: float
    entropy: float
    approx_kl: float
    clip_fraction: float

    @classmethod
    def mean(cls, epochs: list[EpochLosses]) -> EpochLosses:
        """Field-wise mean over the epochs of one optimization phase."""
        return cls(
            **{
                spec.name: _mean_or_none([value for epoch in epochs if (value := getattr(epoch, spec.name)) is not None])
                for spec in fields(cls)
            }
        )


class TrainResult(NamedTuple):
    log: MetricsLog
    checkpoint: CheckpointTyped


def minibatch_indices(rng: np.random.Generator, size: int, num_minibatches: int) -> list[np.ndarray]:
    """A random partition of ``range(size)`` into ``num_minibatches`` equal parts."""
    if num_minibatches < 1 or size % num_minibatches:
        raise ContractError(f"{size} steps cannot be split into {num_minibatches} equal minibatches.")
    order = rng.permutation(size)
    return np.split(order, num_minibatches)


def _mean_or_none(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


class Trainer:
    """
    Owns every stateful piece of one run.

    Parameters
    -----------
    config: :class:`TrainConfig`
        A validated run configuration.
    run_dir: :class:`Path` | None, optional
        Where metrics, checkpoints and diagnostics are written; nothing is written when omitted.
    """

    _logger = logging.getLogger(__name__)

    def __init__(self, config: TrainConfig, run_dir: Path | None = None) -> None:
        validate(config)
        self.config = config
        self.run_dir = run_dir
        self.rngs = RngStreams(config.run.seed)
        self.env = make_env(config.env.name, **config.env.params)
        spec = self.env.spec

        self.model: KoopmanModel | None = None
        if config.run.kippo:
            self.model = KoopmanModel.build(
                spec.state_dim,
                spec.action_dim,
                self.rngs["init.koopman"],
                latent_dim=config.koopman.latent_dim or None,
                action_latent_dim=config.koopman.action_latent_dim or None,
                hidden_layers=config.koopman.hidden_layers,
                hidden_units=config.koopman.hidden_units,
            )
        input_dim = self.model.latent_dim if self.model is not None else spec.state_dim
        agent_rng = self.rngs["init.agent"]
        self.policy = GaussianPolicy.build(
            input_dim, spec.action_dim, agent_rng, config.ppo.hidden_layers, config.ppo.hidden_units
        )
        self.value_fn = ValueFunction.build(input_dim, agent_rng, config.ppo.hidden_layers, config.ppo.hidden_units)

        betas = (config.ppo.adam_beta1, config.ppo.adam_beta2)
        self.agent_optimizer = dc.Adam(
            list(self.agent_parameters().values()), config.ppo.learning_rate, betas, config.ppo.adam_eps
        )
        self.koopman_optimizer: dc.Adam | None = None
        if self.model is not None and config.trains_representation:
            self.koopman_optimizer = dc.Adam(self.model.parameters(), config.ppo.learning_rate, betas, config.ppo.adam_eps)

        self.update = 0
        self.global_step = 0
        self.cursor: RolloutCursor | None = None
        self.ewma: float | None = None
        self.probe: np.ndarray | None = None
        self.probe_latents: np.ndarray | None = None
        self.log = MetricsLog()
        self._started = time.perf_counter()

    def __repr__(self) -> str:
        return f"<Trainer {self.config.method} env={self.config.env.name} update={self.update}/{self.config.num_updates}>"

    def agent_parameters(self) -> dict[str, dc.Tensor]:
        return {**self.policy.named_parameters(), **self.value_fn.named_parameters()}

    @property
    def optimizers(self) -> list[dc.Adam]:
        return [opt for opt in (self.koopman_optimizer, self.agent_optimizer) if opt is not None]

    @property
    def finished(self) -> bool:
        return self.update >= self.config.num_updates

    # -- optimization -----------------------------------------------------------------

    def representation_losses(
        self, buffer: RolloutBuffer, idx: np.ndarray
    ) -> tuple[dc.Tensor, dc.Tensor, dc.Tensor, dc.Tensor]:
        """``(L_rec, L_ls, L_ss, L_KI)`` on the minibatch ``idx``; one latent unroll feeds both prediction losses."""
        assert self.model is not None
        cfg = self.config.koopman
        state_windows = dc.Tensor(buffer.state_windows[idx])
        action_windows = dc.Tensor(buffer.action_windows[idx])
        masks = buffer.mask_windows[idx]
        l_rec = loss_reconstruction(self.model, dc.Tensor(buffer.states[idx]))
        prediction = predict_latent_sequence(
            self.model, encode_state(self.model, state_windows[:, 0, :]), action_windows
        )
        l_ls = loss_latent_prediction(
            self.model, state_windows, action_windows, masks, cfg.prediction_normalization, prediction
        )
        l_ss = loss_state_prediction(
            self.model, state_windows, action_windows, masks, cfg.prediction_normalization, prediction
        )
        return l_rec, l_ls, l_ss, loss_representation_total(l_rec, l_ls, l_ss, *self.config.loss_weights)

    def check_decoupling(self, l_ki: dc.Tensor | None, l_ppo: dc.Tensor) -> None:
        """
        Back-propagate each loss on its own and check it leaves the other group's gradients at zero.

        Raises
        -------
        :exc:`ContractError`
            A loss produced a non-zero gradient outside its own parameter group.
        """
        koopman = self.model.named_parameters() if self.model is not None else {}
        agent = self.agent_parameters()
        everything = [*koopman.values(), *agent.values()]
        leaked: list[str] = []
        dc.zero_grad(everything)
        dc.backward(l_ppo)
        leaked += [f"L_ppo -> {name}" for name, p in koopman.items() if p.grad is not None and np.any(p.grad)]
        dc.zero_grad(everything)
        if l_ki is not None:
            dc.backward(l_ki)
            leaked += [f"L_KI -> {name}" for name, p in agent.items() if p.grad is not None and np.any(p.grad)]
            dc.zero_grad(everything)
        if leaked:
            raise ContractError("Gradient leaked across parameter groups: " + ", ".join(leaked))

    def optimize_minibatch(self, buffer: RolloutBuffer, gae: GaeOutput, idx: np.ndarray) -> dict[str, float]:
        l_rec = l_ls = l_ss = l_ki = None
        if self.koopman_optimizer is not None:
            l_rec, l_ls, l_ss, l_ki = self.representation_losses(buffer, idx)

        batch = PpoBatch(
            y=actor_inputs(self.model, buffer.states[idx]),
            actions=buffer.actions[idx],
            old_log_probs=buffer.log_probs[idx],
            advantages=gae.advantages[idx],
            returns=gae.returns[idx],
            old_values=buffer.values[idx],
        )
        ppo = ppo_loss(batch, self.policy, self.value_fn, self.config.ppo_coefficients())
        losses = {
            "L_ppo_policy": ppo.policy_loss,
            "L_ppo_value": ppo.value_loss,
            "entropy": ppo.entropy,
            "approx_kl": ppo.approx_kl,
            "clip_fraction": ppo.clip_fraction,
        }
        if l_ki is not None:
            losses |= {"L_rec": l_rec.item(), "L_ls": l_ls.item(), "L_ss": l_ss.item()}  # type: ignore[union-attr]
        bad = {name: value for name, value in losses.items() if not np.isfinite(value)}
        if bad:
            raise NonFiniteError(
                f"Non-finite loss during update {self.update}: {', '.join(sorted(bad))}.",
                {"update": self.update, "global_step": self.global_step, "losses": losses},
            )

        if self.config.output.check_decoupling:
            self.check_decoupling(l_ki, ppo.loss)
        total = ppo.loss if l_ki is None else l_ki + ppo.loss
        for optimizer in self.optimizers:
            optimizer.zero_grad()
        dc.backward(total)
        for optimizer in self.optimizers:
            dc.clip_grad_norm(optimizer.params, self.config.ppo.max_grad_norm)
            optimizer.step()
        return losses

    def optimize_phase(self, buffer: RolloutBuffer, gae: GaeOutput) -> list[EpochLosses]:
        """Run every epoch over ``buffer``; returns the per-epoch minibatch means."""
        epochs: list[EpochLosses] = []
        for _ in range(self.config.rollout.update_epochs):
            totals: dict[str, list[float]] = {}
            for idx in minibatch_indices(self.rngs["shuffle"], len(buffer), self.config.rollout.num_minibatches):
                for name, value in self.optimize_minibatch(buffer, gae, idx).items():
                    totals.setdefault(name, []).append(value)
            epochs.append(
                EpochLosses(
                    L_rec=_mean_or_none(totals.get("L_rec", [])),
                    L_ls=_mean_or_none(totals.get("L_ls", [])),
                    L_ss=_mean_or_none(totals.get("L_ss", [])),
                    L_ppo_policy=float(np.mean(totals["L_ppo_policy"])),
                    L_ppo_value=float(np.mean(totals["L_ppo_value"])),
                    entropy=float(np.mean(totals["entropy"])),
                    approx_kl=float(np.mean(totals["approx_kl"])),
                    clip_fraction=float(np.mean(totals["clip_fraction"])),
                )
            )
        return epochs

    # -- evaluation -------------------------------------------------------------------

    def evaluate_cte(self, buffer: RolloutBuffer) -> float | None:
        """CTE of the current model on up to ``cte_windows`` fully unmasked windows of ``buffer``."""
        count = self.config.metrics.cte_windows
        candidates = buffer.full_window_indices()
        if self.model is None or count == 0:
            return None
        if candidates.size == 0:
            self._logger.warning("No complete prediction window in update %s; CTE skipped.", self.update)
            return None
        idx = self.rngs["cte"].choice(candidates, size=min(count, candidates.size), replace=False)
        with dc.no_grad():
            windows = dc.Tensor(buffer.state_windows[idx])
            prediction = predict_latent_sequence(
                self.model, encode_state(self.model, windows[:, 0, :]), dc.Tensor(buffer.action_windows[idx])
            )
            predicted = decode_state(self.model, prediction.predicted_latents).data
        return cte_batch(predicted, buffer.state_windows[idx][:, 1:, :])

    def _encode_probe(self) -> np.ndarray | None:
        if self.probe is None or self.model is None:
            return None
        return actor_inputs(self.model, self.probe)

    # -- the loop ---------------------------------------------------------------------

    def _set_learning_rate(self) -> None:
        ppo = self.config.ppo
        lr = ppo.learning_rate
        if ppo.anneal_lr:
            lr *= 1.0 - (self.update - 1.0) / self.config.num_updates
        for optimizer in self.optimizers:
            optimizer.lr = lr

    def step_update(self) -> MetricsRowTyped:
        """Collect one rollout, optimize on it and append one metrics row."""
        cfg = self.config
        self.update += 1
        self._set_learning_rate()
        if self.cursor is None:
            self.cursor = RolloutCursor.start(self.env, self.rngs["env"])

        first_step = self.global_step
        buffer = collect_rollout(
            self.env,
            self.model,
            self.policy,
            self.value_fn,
            cfg.rollout.num_steps,
            cfg.koopman.horizon,
            cursor=self.cursor,
            env_rng=self.rngs["env"],
            action_rng=self.rngs["action"],
            gamma=cfg.ppo.gamma,
        )
        self.global_step += len(buffer)
        if cfg.output.dump_trajectory and self.run_dir is not None:
            dump_trajectory(buffer, self.run_dir / TRAJECTORY_FILE, first_step)
        for episode_return in buffer.episode_returns:
            self.ewma = ewma_update(self.ewma, episode_return, cfg.metrics.ewma_alpha, cfg.metrics.ewma_convention)

        trains = self.koopman_optimizer is not None
        if trains and self.probe is None:
            size = min(cfg.metrics.probe_size, len(buffer))
            self.probe = buffer.states[np.sort(self.rngs["probe"].choice(len(buffer), size=size, replace=False))]
            self.probe_latents = self._encode_probe()
        cte_value = self.evaluate_cte(buffer) if trains else None

        gae = compute_gae(
            buffer.gae_rewards, buffer.values, buffer.dones, buffer.next_value, cfg.ppo.gamma, cfg.ppo.gae_lambda
        )
        phase = EpochLosses.mean(self.optimize_phase(buffer, gae))

        drift = None
        if trains:
            latents = self._encode_probe()
            assert latents is not None and self.probe_latents is not None
            drift = representation_drift(self.probe_latents, latents)
            self.probe_latents = latents

        return_mean = _mean_or_none(buffer.episode_returns)
        if return_mean is None:
            self._logger.warning("No episode finished during update %s.", self.update)
        row: MetricsRowTyped = {
            "global_step": self.global_step,
            "episodic_return_mean": return_mean,
            "ewma": self.ewma,
            "L_rec": phase.L_rec,
            "L_ls": phase.L_ls,
            "L_ss": phase.L_ss,
            "L_ppo_policy": phase.L_ppo_policy,
            "L_ppo_value": phase.L_ppo_value,
            "entropy": phase.entropy,
            "cte": cte_value,
            "wall_time_s": time.perf_counter() - self._started if cfg.output.record_wall_time else None,
            "repr_drift": drift,
            "clip_fraction": phase.clip_fraction,
        }
        self.log.append(row)
        self._logger.info(
            "update %s/%s step=%s return=%s ewma=%s L_rec=%s L_ls=%s L_ss=%s L_pi=%s L_v=%s cte=%s",
            self.update,
            cfg.num_updates,
            self.global_step,
            return_mean,
            self.ewma,
            phase.L_rec,
            phase.L_ls,
            phase.L_ss,
            phase.L_ppo_policy,
            phase.L_ppo_value,
            cte_value,
        )
        return row

    def run(self) -> TrainResult:
        """
        Train until ``total_steps`` environment steps have been consumed.

        The last rollout may overshoot ``total_steps`` by less than one rollout length.

        Raises
        -------
        :exc:`NonFiniteError`
            A loss or network output became non-finite; ``abort.json`` is written to the run directory first.
        """
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / CONFIG_FILE).write_text(config_to_ini(self.config), encoding="utf-8")
        interval = self.config.output.checkpoint_interval
        try:
            while not self.finished:
                self.step_update()
                if self.run_dir is not None:
                    self.log.write_csv(self.run_dir / METRICS_FILE)
                    if interval and self.update % interval == 0 and not self.finished:
                        self.save_checkpoint(self.run_dir / CHECKPOINT_FILE)
        except NonFiniteError as exc:
            self._logger.error("Run aborted at update %s: %s %s", self.update, exc, exc.diagnostic)
            if self.run_dir is not None:
                diagnostic = {"error": str(exc), "update": self.update, "global_step": self.global_step, **exc.diagnostic}
                (self.run_dir / ABORT_FILE).write_text(
                    json.dumps(diagnostic, sort_keys=True, indent=2, default=str), encoding="utf-8"
                )
                self.log.write_csv(self.run_dir / METRICS_FILE)
            raise
        doc = self.checkpoint_document()
        if self.run_dir is not None:
            write_checkpoint(doc, self.run_dir / CHECKPOINT_FILE)
        return TrainResult(self.log, doc)

    # -- checkpoints ------------------------------------------------------------------

    def checkpoint_document(self) -> CheckpointTyped:
        groups = {"agent": params_to_doc(self.agent_parameters())}
        adam = {"agent": adam_to_doc(self.agent_optimizer, list(self.agent_parameters()))}
        if self.model is not None:
            groups["koopman"] = params_to_doc(self.model.named_parameters())
        if self.koopman_optimizer is not None and self.model is not None:
            adam["koopman"] = adam_to_doc(self.koopman_optimizer, list(self.model.named_parameters()))
        cursor = self.cursor
        trainer: TrainerStateTyped = {
            "update": self.update,
            "global_step": self.global_step,
            "observation": [] if cursor is None else [float(v) for v in cursor.observation],
            "episode_return": 0.0 if cursor is None else float(cursor.episode_return),
            "episode_length": 0 if cursor is None else cursor.episode_length,
            "ewma": self.ewma,
            "probe": None if self.probe is None else tensor_doc(self.probe),
            "probe_latents": None if self.probe_latents is None else tensor_doc(self.probe_latents),
        }
        return {
            "format": FORMAT,
            "version": VERSION,
            "config_hash": config_hash(self.config),
            "config": config_to_ini(self.config),
            "groups": groups,
            "adam": adam,
            "rng": self.rngs.get_state(),
            "env": self.env.get_state(),
            "trainer": trainer,
        }

    def save_checkpoint(self, path: Path) -> None:
        write_checkpoint(self.checkpoint_document(), path)
        self._logger.info("Saved checkpoint at update %s to %s", self.update, path)

    def load_state(self, doc: CheckpointTyped) -> None:
        """
        Restore everything from a checkpoint document.

        The whole document is validated against this trainer before anything is assigned.

        Raises
        -------
        :exc:`CheckpointSchemaError`
            The document does not fit this run's configuration or parameter layout.
        """
        if doc["config_hash"] != config_hash(self.config):
            raise CheckpointSchemaError("Checkpoint was written for a different configuration.")
        groups = doc["groups"]
        if ("koopman" in groups) != (self.model is not None):
            raise CheckpointSchemaError("Checkpoint parameter groups do not match the run mode.")
        if ("koopman" in doc["adam"]) != (self.koopman_optimizer is not None):
            raise CheckpointSchemaError("Checkpoint optimizer states do not match the run mode.")
        agent = self.agent_parameters()
        koopman = self.model.named_parameters() if self.model is not None else {}
        agent_arrays = params_from_doc(groups["agent"], agent, "groups.agent")
        koopman_arrays = params_from_doc(groups["koopman"], koopman, "groups.koopman") if koopman else {}
        agent_adam = adam_from_doc(doc["adam"]["agent"], agent, "adam.agent")
        koopman_adam = adam_from_doc(doc["adam"]["koopman"], koopman, "adam.koopman") if "koopman" in doc["adam"] else None

        state = doc["trainer"]
        try:
            update, global_step = int(state["update"]), int(state["global_step"])
            observation = np.array(state["observation"], dtype=np.float64)
            episode_return, episode_length = float(state["episode_return"]), int(state["episode_length"])
            ewma = None if state["ewma"] is None else float(state["ewma"])
        except (TypeError, ValueError) as exc:
            raise CheckpointSchemaError("Malformed trainer state in checkpoint.") from exc
        if observation.size not in (0, self.env.spec.state_dim):
            raise CheckpointSchemaError(f"Checkpoint observation has {observation.size} entries.")
        probe = None if state["probe"] is None else array_from_doc(state["probe"], "trainer.probe")
        probe_latents = (
            None if state["probe_latents"] is None else array_from_doc(state["probe_latents"], "trainer.probe_latents")
        )
        if int(doc["rng"]["seed"]) != self.rngs.seed or doc["env"]["name"] != self.env.name:
            raise CheckpointSchemaError("Checkpoint RNG or environment state belongs to another run.")

        for name, array in agent_arrays.items():
            agent[name].data = array
        for name, array in koopman_arrays.items():
            koopman[name].data = array
        self.agent_optimizer.state = agent_adam
        if self.koopman_optimizer is not None and koopman_adam is not None:
            self.koopman_optimizer.state = koopman_adam
        self.rngs.set_state(doc["rng"])
        self.env.set_state(doc["env"])
        self.update, self.global_step, self.ewma = update, global_step, ewma
        self.cursor = None if observation.size == 0 else RolloutCursor(observation, episode_return, episode_length)
        self.probe, self.probe_latents = probe, probe_latents
        self._logger.info("Restored checkpoint at update %s (step %s)", update, global_step)

    @classmethod
    def from_checkpoint(cls, path: Path, run_dir: Path | None = None) -> Trainer:
        """
        Rebuild a trainer from a checkpoint written by :meth:`save_checkpoint`.

        Metrics rows already present in ``run_dir`` up to the checkpoint's update are kept,
        so a resumed run appends exactly where the interrupted one stopped.
        """
        doc = read_checkpoint(path)
        config = config_from_ini(doc["config"])
        if run_dir is not None:
            config.run.output_dir = str(run_dir)
        trainer = cls(config, run_dir)
        trainer.load_state(doc)
        metrics_path = run_dir / METRICS_FILE if run_dir is not None else None
        if metrics_path is not None and metrics_path.exists():
            previous = MetricsLog.read_csv(metrics_path)
            trainer.log.rows = previous.rows[: trainer.update]
        return trainer


def train(config: TrainConfig, run_dir: Path | None = None) -> TrainResult:
    """Run one configuration from scratch."""
    return Trainer(config, run_dir).run()


def describe(result: TrainResult) -> dict[str, Any]:
    """Short JSON-safe summary of a finished run."""
    final = result.log.rows[-1] if result.log.rows else {}
    return {"updates": len(result.log), "final": dict(final), "config_hash": result.checkpoint["config_hash"]}

