from __future__ import annotations

import numpy as np
import pytest

from kippo import diffcore as dc
from kippo.config import TrainConfig
from kippo.envs import LinearizablePoly
from kippo.koopman import KoopmanModel


class QuadraticLift:
    """Exact lifting ``(x1, x2) -> (x1, x2, x1^2)`` of the polynomial system; no trainable parameters."""

    def __call__(self, x: dc.Tensor) -> dc.Tensor:
        first = x[:, :1]
        return dc.concat([x, first * first], axis=1)

    def named_parameters(self) -> dict[str, dc.Tensor]:
        return {}


def linear_layer(weight: np.ndarray, name: str) -> dc.Mlp:
    """A single affine layer ``x @ weight`` with a zero bias."""
    weight = np.asarray(weight, dtype=np.float64)
    return dc.Mlp([(dc.parameter(weight), dc.parameter(np.zeros(weight.shape[1])))], name=name)


def oracle_model(env: LinearizablePoly) -> KoopmanModel:
    """The closed-form lifted model of ``env``: exact lift, projection decoder and the analytic matrices."""
    a_z, b_z = env.lifted_matrices()
    return KoopmanModel(
        QuadraticLift(),
        linear_layer(np.eye(3)[:, :2], "psi_x"),
        linear_layer(np.eye(1), "phi_u"),
        dc.parameter(a_z),
        dc.parameter(b_z),
    )


def linpoly_rollout(env: LinearizablePoly, steps: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """States, applied actions and done flags of a random-action trajectory (resets on truncation)."""
    rng = np.random.default_rng(seed)
    bound = env.spec.action_high[0]
    states = np.zeros((steps, 2))
    actions = rng.uniform(-bound, bound, size=(steps, 1))
    dones = np.zeros(steps, dtype=bool)
    observation = env.reset(seed)
    for t in range(steps):
        states[t] = observation
        result = env.step(actions[t])
        dones[t] = result.done
        observation = env.reset(seed + t + 1) if result.done else result.next_state
    return states, actions, dones


def small_config(env: str = "pendulum", *, kippo: bool = True, seed: int = 1, total_steps: int = 96) -> TrainConfig:
    """A config that trains in well under a second."""
    config = TrainConfig()
    config.run.seed = seed
    config.run.total_steps = total_steps
    config.run.kippo = kippo
    config.env.name = env  # type: ignore[assignment]
    config.env.params["max_episode_steps"] = 20.0
    config.rollout.num_steps = 32
    config.rollout.num_minibatches = 4
    config.rollout.update_epochs = 2
    config.koopman.horizon = 4
    config.koopman.hidden_units = 16
    config.ppo.hidden_units = 16
    config.metrics.cte_windows = 8
    config.metrics.probe_size = 8
    return config


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def linpoly() -> LinearizablePoly:
    return LinearizablePoly()


@pytest.fixture
def config() -> TrainConfig:
    return small_config()
