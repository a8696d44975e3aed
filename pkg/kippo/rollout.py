"""
On-policy experience collection.

Indexing convention
--------------------
``states[t]`` is the observation the agent acted on at step ``t`` and ``dones[t]`` says the
episode ended on the transition out of it (terminated or truncated). When ``dones[t]`` is
set, ``states[t + 1]`` is the first observation of a fresh episode.

Windows are anchored backwards: stored step ``t`` owns the window whose initial state is
``states[t - H]``, whose targets are ``states[t - H + 1 .. t]``, whose actions are
``env_actions[t - H .. t - 1]`` and whose mask is :func:`build_mask` of
``dones[t - H .. t - 1]``. Steps with ``t < H`` have no full history; their windows are
zero-padded and fully masked.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from . import diffcore as dc
from .agent import act
from .errors import ContractError, ShapeError
from .koopman import encode_state

if TYPE_CHECKING:
    from pathlib import Path

    from .agent import GaussianPolicy, ValueFunction
    from .envs import Env
    from .koopman import KoopmanModel

__all__ = (
    "GaeOutput",
    "RolloutBuffer",
    "RolloutCursor",
    "actor_inputs",
    "build_mask",
    "build_windows",
    "collect_rollout",
    "compute_gae",
    "draw_reset_seed",
    "dump_trajectory",
)

_logger = logging.getLogger(__name__)


def draw_reset_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def actor_inputs(model: KoopmanModel | None, states: np.ndarray) -> np.ndarray:
    """Detached actor/critic inputs: encoded latents, or the raw states when there is no model."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if model is None:
        return states.copy()
    with dc.no_grad():
        return encode_state(model, dc.Tensor(states)).data


def build_mask(dones: np.ndarray | list[bool]) -> np.ndarray:
    """
    Episode-boundary mask for one window of ``H`` done flags ``d_t .. d_{t+H-1}``.

    ``b_h`` is 1 when no flag is set among the first ``h`` entries, else 0, so the mask is
    non-increasing in ``h``.
    """
    flags = np.asarray(dones, dtype=bool).reshape(-1)
    return (np.cumsum(flags) == 0).astype(np.float64)


def build_windows(
    states: np.ndarray, actions: np.ndarray, dones: np.ndarray, horizon: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Assemble the trailing prediction windows for every stored step.

    Returns
    --------
    :class:`tuple`
        ``(state_windows T x (H+1) x S, action_windows T x H x A, mask_windows T x H)``.
    """
    if horizon < 1:
        raise ContractError(f"Prediction horizon must be at least 1, got {horizon}.")
    steps = states.shape[0]
    if actions.shape[0] != steps or np.shape(dones) != (steps,):
        raise ShapeError(f"Rollout arrays disagree on length: {states.shape}, {actions.shape}, {np.shape(dones)}.")
    state_windows = np.zeros((steps, horizon + 1, states.shape[1]))
    action_windows = np.zeros((steps, horizon, actions.shape[1]))
    mask_windows = np.zeros((steps, horizon))
    for t in range(horizon, steps):
        start = t - horizon
        state_windows[t] = states[start : t + 1]
        action_windows[t] = actions[start:t]
        mask_windows[t] = build_mask(dones[start:t])
    return state_windows, action_windows, mask_windows


class GaeOutput(NamedTuple):
    advantages: np.ndarray
    returns: np.ndarray


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    next_value: float,
    gamma: float,
    gae_lambda: float,
) -> GaeOutput:
    """
    Generalized advantage estimation.

    ``delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t`` and
    ``A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}``; ``next_value`` is ``V_T``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    not_done = 1.0 - np.asarray(dones, dtype=np.float64)
    if not (rewards.shape == values.shape == not_done.shape) or rewards.ndim != 1:
        raise ShapeError(f"GAE inputs must be equal-length vectors: {rewards.shape}, {values.shape}, {not_done.shape}.")
    advantages = np.zeros_like(rewards)
    last = 0.0
    for t in reversed(range(rewards.shape[0])):
        following = next_value if t == rewards.shape[0] - 1 else values[t + 1]
        delta = rewards[t] + gamma * following * not_done[t] - values[t]
        last = delta + gamma * gae_lambda * not_done[t] * last
        advantages[t] = last
    return GaeOutput(advantages, advantages + values)


@dataclass
class RolloutCursor:
    """
    Where collection resumes: the pending observation and the running episode totals.

    Attributes
    -----------
    observation: :class:`numpy.ndarray`
        The observation the next action will be chosen for.
    episode_return: :class:`float`
        Undiscounted return of the unfinished episode.
    episode_length: :class:`int`
        Steps taken in the unfinished episode.
    """

    observation: np.ndarray
    episode_return: float = 0.0
    episode_length: int = 0

    @classmethod
    def start(cls, env: Env, rng: np.random.Generator) -> RolloutCursor:
        return cls(env.reset(draw_reset_seed(rng)))


@dataclass
class RolloutBuffer:
    """
    One rollout of ``T`` steps.

    Attributes
    -----------
    actions:
        The sampled (unclamped) actions; their log-probabilities are in ``log_probs``.
    env_actions:
        The actions the environment applied after clamping; prediction windows use these.
    truncation_values:
        ``gamma V(final state)`` on steps that ended by truncation, else 0.
    next_value:
        Critic value of the observation following the last step.
    episode_returns:
        Undiscounted returns of the episodes that finished during this rollout.
    """

    states: np.ndarray
    actions: np.ndarray
    env_actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    terminated: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    truncation_values: np.ndarray
    next_value: float
    horizon: int
    episode_returns: list[float] = field(default_factory=list)
    episode_lengths: list[int] = field(default_factory=list)
    state_windows: np.ndarray = field(init=False)
    action_windows: np.ndarray = field(init=False)
    mask_windows: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        steps = self.states.shape[0]
        for name in ("actions", "env_actions", "rewards", "dones", "terminated", "log_probs", "values"):
            if getattr(self, name).shape[0] != steps:
                raise ShapeError(f"Rollout field {name!r} has {getattr(self, name).shape[0]} rows, expected {steps}.")
        self.state_windows, self.action_windows, self.mask_windows = build_windows(
            self.states, self.env_actions, self.dones, self.horizon
        )

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def gae_rewards(self) -> np.ndarray:
        """Rewards with the truncation bootstrap folded in."""
        return self.rewards + self.truncation_values

    def full_window_indices(self) -> np.ndarray:
        """Steps whose whole window lies inside one episode."""
        return np.flatnonzero(self.mask_windows.min(axis=1) == 1.0)


def collect_rollout(
    env: Env,
    model: KoopmanModel | None,
    policy: GaussianPolicy,
    value_fn: ValueFunction,
    num_steps: int,
    horizon: int,
    *,
    cursor: RolloutCursor,
    env_rng: np.random.Generator,
    action_rng: np.random.Generator,
    gamma: float,
) -> RolloutBuffer:
    """
    Run the current policy for ``num_steps`` environment steps.

    The encoder is only read: latents are computed without gradient tracking. ``cursor``
    is advanced in place so the next rollout continues the same episode.

    Parameters
    -----------
    env: :class:`Env`
        An environment that has been reset at least once.
    model: :class:`KoopmanModel` | None
        Encoder for the actor inputs; ``None`` feeds raw states.
    cursor: :class:`RolloutCursor`
        Pending observation and episode totals.
    env_rng: :class:`numpy.random.Generator`
        Draws the reset seeds.
    action_rng: :class:`numpy.random.Generator`
        Draws the action noise.
    gamma: :class:`float`
        Discount used for the truncation bootstrap.
    """
    state_dim, action_dim = env.spec.state_dim, env.spec.action_dim
    if cursor.observation.shape != (state_dim,):
        raise ShapeError(f"Cursor observation {cursor.observation.shape} does not match state_dim={state_dim}.")
    states = np.zeros((num_steps, state_dim))
    actions = np.zeros((num_steps, action_dim))
    env_actions = np.zeros((num_steps, action_dim))
    rewards = np.zeros(num_steps)
    dones = np.zeros(num_steps, dtype=bool)
    terminated = np.zeros(num_steps, dtype=bool)
    log_probs = np.zeros(num_steps)
    values = np.zeros(num_steps)
    truncation_values = np.zeros(num_steps)
    episode_returns: list[float] = []
    episode_lengths: list[int] = []

    for t in range(num_steps):
        observation = cursor.observation
        sample = act(policy, value_fn, actor_inputs(model, observation), action_rng)
        action = sample.action[0]
        result = env.step(action)

        states[t] = observation
        actions[t] = action
        env_actions[t] = np.clip(action, env.spec.action_low, env.spec.action_high)
        rewards[t] = result.reward
        dones[t] = result.done
        terminated[t] = result.terminated
        log_probs[t] = sample.log_prob[0]
        values[t] = sample.value[0]

        cursor.episode_return += result.reward
        cursor.episode_length += 1
        if result.truncated and not result.terminated:
            with dc.no_grad():
                final_value = value_fn(dc.Tensor(actor_inputs(model, result.next_state))).data[0]
            truncation_values[t] = gamma * final_value
        if result.done:
            episode_returns.append(cursor.episode_return)
            episode_lengths.append(cursor.episode_length)
            _logger.debug("Episode finished: return=%s length=%s", cursor.episode_return, cursor.episode_length)
            cursor.episode_return, cursor.episode_length = 0.0, 0
            cursor.observation = env.reset(draw_reset_seed(env_rng))
        else:
            cursor.observation = result.next_state

    with dc.no_grad():
        next_value = float(value_fn(dc.Tensor(actor_inputs(model, cursor.observation))).data[0])
    return RolloutBuffer(
        states=states,
        actions=actions,
        env_actions=env_actions,
        rewards=rewards,
        dones=dones,
        terminated=terminated,
        log_probs=log_probs,
        values=values,
        truncation_values=truncation_values,
        next_value=next_value,
        horizon=horizon,
        episode_returns=episode_returns,
        episode_lengths=episode_lengths,
    )


def dump_trajectory(buffer: RolloutBuffer, path: Path, first_step: int) -> None:
    """
    Append a rollout to a CSV file with columns ``step, state_*, action_*, reward, done``.

    The header is written when the file does not exist yet.
    """
    state_dim, action_dim = buffer.states.shape[1], buffer.env_actions.shape[1]
    new_file = not path.exists()
    with path.open("a", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if new_file:
            writer.writerow(
                ["step", *[f"state_{i}" for i in range(state_dim)], *[f"action_{i}" for i in range(action_dim)],
                 "reward", "done"]
            )
        for t in range(len(buffer)):
            writer.writerow(
                [first_step + t, *map(repr, buffer.states[t].tolist()), *map(repr, buffer.env_actions[t].tolist()),
                 repr(float(buffer.rewards[t])), int(buffer.dones[t])]
            )
