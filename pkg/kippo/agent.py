"""
Gaussian actor, critic and the PPO clipped-surrogate objective.

Both networks consume detached inputs: either latents from the state encoder (KIPPO) or
raw states (plain PPO). Nothing computed here can send a gradient into the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, ClassVar, NamedTuple

import numpy as np

from . import diffcore as dc
from .errors import NonFiniteError

if TYPE_CHECKING:
    from .diffcore import Mlp, Tensor

__all__ = (
    "ActResult",
    "GaussianPolicy",
    "PpoBatch",
    "PpoCoefficients",
    "PpoLossOutput",
    "ValueFunction",
    "act",
    "clipped_surrogate",
    "normalize_advantages",
    "ppo_loss",
)

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class GaussianPolicy:
    """
    Diagonal Gaussian with a state-dependent mean and a state-independent ``log_std``.

    Parameters
    -----------
    mean_net: :class:`Mlp`
        ``input_dim -> action_dim``.
    log_std: :class:`Tensor` | None, optional
        Trainable ``action_dim`` vector, zeros when omitted.
    """

    LOG_STD_MIN: ClassVar[float] = -20.0
    LOG_STD_MAX: ClassVar[float] = 2.0

    def __init__(self, mean_net: Mlp, log_std: Tensor | None = None) -> None:
        self.mean_net = mean_net
        self.log_std = log_std if log_std is not None else dc.parameter(np.zeros(mean_net.out_features))
        self.log_std.name = "log_std"

    @classmethod
    def build(
        cls, input_dim: int, action_dim: int, rng: np.random.Generator, hidden_layers: int = 2, hidden_units: int = 64
    ) -> GaussianPolicy:
        return cls(dc.Mlp.build([input_dim, *[hidden_units] * hidden_layers, action_dim], rng, name="actor"))

    @property
    def action_dim(self) -> int:
        return self.mean_net.out_features

    def clamped_log_std(self) -> Tensor:
        return dc.clip(self.log_std, self.LOG_STD_MIN, self.LOG_STD_MAX)

    def mean(self, y: Tensor) -> Tensor:
        return self.mean_net(y)

    def log_prob(self, y: Tensor, actions: Tensor | np.ndarray) -> Tensor:
        """Diagonal-Gaussian log-density of ``actions`` (``batch x action_dim``), one value per row."""
        log_std = self.clamped_log_std()
        z = (dc.Tensor(actions) - self.mean(y)) * dc.exp(-log_std)
        return (z * z).sum(axis=1) * -0.5 - log_std.sum() - self.action_dim * _HALF_LOG_2PI

    def entropy(self) -> Tensor:
        """``sum(log_std + 0.5 log(2 pi e))``; the same for every state."""
        return (self.clamped_log_std() + (0.5 + _HALF_LOG_2PI)).sum()

    def named_parameters(self) -> dict[str, Tensor]:
        params = {f"actor.{name}": tensor for name, tensor in self.mean_net.named_parameters().items()}
        params["log_std"] = self.log_std
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class ValueFunction:
    def __init__(self, net: Mlp) -> None:
        self.net = net

    @classmethod
    def build(
        cls, input_dim: int, rng: np.random.Generator, hidden_layers: int = 2, hidden_units: int = 64
    ) -> ValueFunction:
        return cls(dc.Mlp.build([input_dim, *[hidden_units] * hidden_layers, 1], rng, name="critic"))

    def __call__(self, y: Tensor) -> Tensor:
        """One value per row of ``y``."""
        return self.net(y).reshape(y.shape[0])

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"critic.{name}": tensor for name, tensor in self.net.named_parameters().items()}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class ActResult(NamedTuple):
    action: np.ndarray
    log_prob: np.ndarray
    value: np.ndarray


def act(policy: GaussianPolicy, value_fn: ValueFunction, y: np.ndarray, rng: np.random.Generator) -> ActResult:
    """
    Sample actions for a batch of detached inputs.

    Parameters
    -----------
    policy: :class:`GaussianPolicy`
        The actor.
    value_fn: :class:`ValueFunction`
        The critic.
    y: :class:`numpy.ndarray`
        ``batch x input_dim`` detached latents (or raw states in plain PPO).
    rng: :class:`numpy.random.Generator`
        The action-sampling stream.

    Returns
    --------
    :class:`ActResult`
        Unclamped actions, their log-probabilities and the critic's values.

    Raises
    -------
    :exc:`NonFiniteError`
        The actor or critic produced a NaN or infinity.
    """
    with dc.no_grad():
        inputs = dc.Tensor(y)
        mean = policy.mean(inputs).data
        std = np.exp(policy.clamped_log_std().data)
        action = mean + std * rng.standard_normal(mean.shape)
        log_prob = policy.log_prob(inputs, action).data
        value = value_fn(inputs).data
    if not (np.all(np.isfinite(action)) and np.all(np.isfinite(log_prob)) and np.all(np.isfinite(value))):
        raise NonFiniteError(
            "Actor or critic produced a non-finite output during action selection.",
            {"what": "act", "mean": mean.tolist(), "log_std": policy.log_std.data.tolist(), "value": value.tolist()},
        )
    return ActResult(action, log_prob, value)


@dataclass
class PpoBatch:
    """
    Attributes
    -----------
    y: :class:`numpy.ndarray`
        ``batch x input_dim`` detached inputs.
    actions: :class:`numpy.ndarray`
        ``batch x action_dim`` actions taken during the rollout.
    old_log_probs: :class:`numpy.ndarray`
        Log-probabilities under the rollout policy.
    advantages: :class:`numpy.ndarray`
        Raw (unnormalised) advantages.
    returns: :class:`numpy.ndarray`
        Critic targets.
    old_values: :class:`numpy.ndarray`
        Critic values recorded during the rollout, used by value clipping.
    """

    y: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    old_values: np.ndarray


@dataclass(frozen=True)
class PpoCoefficients:
    clip_coef: float = 0.2
    pg_coef: float = 1.0
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    norm_adv: bool = True
    clip_vloss: bool = True


@dataclass
class PpoLossOutput:
    loss: Tensor
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float


def normalize_advantages(advantages: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Shift to mean 0 and scale by the sample standard deviation, guarded by ``eps``."""
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.size < 2:
        return advantages - advantages.mean()
    return (advantages - advantages.mean()) / (advantages.std(ddof=1) + eps)


def clipped_surrogate(ratio: Tensor, advantages: np.ndarray, clip_coef: float) -> Tensor:
    """Per-sample ``min(r A, clip(r, 1 - eps, 1 + eps) A)``."""
    unclipped = ratio * advantages
    clipped = dc.clip(ratio, 1.0 - clip_coef, 1.0 + clip_coef) * advantages
    return dc.minimum(unclipped, clipped)


def ppo_loss(
    batch: PpoBatch, policy: GaussianPolicy, value_fn: ValueFunction, coefs: PpoCoefficients | None = None
) -> PpoLossOutput:
    """
    ``-pg_coef E[L_clip] + vf_coef E[value error] - ent_coef E[entropy]``.

    The value error is ``(V - R)^2``, or with value clipping the larger of that and the
    error of ``V_old + clip(V - V_old, -eps, eps)``.
    """
    coefs = coefs or PpoCoefficients()
    inputs = dc.Tensor(batch.y)
    advantages = normalize_advantages(batch.advantages) if coefs.norm_adv else np.asarray(batch.advantages)

    new_log_prob = policy.log_prob(inputs, batch.actions)
    log_ratio = new_log_prob - batch.old_log_probs
    ratio = dc.exp(log_ratio)
    surrogate = clipped_surrogate(ratio, advantages, coefs.clip_coef).mean()
    policy_loss = -surrogate

    values = value_fn(inputs)
    error = values - batch.returns
    value_error = error * error
    if coefs.clip_vloss:
        clipped_values = dc.clip(values - batch.old_values, -coefs.clip_coef, coefs.clip_coef) + batch.old_values
        clipped_error = clipped_values - batch.returns
        value_error = dc.maximum(value_error, clipped_error * clipped_error)
    value_loss = value_error.mean()

    entropy = policy.entropy()
    loss = policy_loss * coefs.pg_coef + value_loss * coefs.vf_coef - entropy * coefs.ent_coef

    r = ratio.data
    return PpoLossOutput(
        loss=loss,
        policy_loss=policy_loss.item(),
        value_loss=value_loss.item(),
        entropy=entropy.item(),
        approx_kl=float(np.mean((r - 1.0) - log_ratio.data)),
        clip_fraction=float(np.mean(np.abs(r - 1.0) > coefs.clip_coef)),
    )
