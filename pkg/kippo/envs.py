"""
Deterministic, seedable continuous-control environments.

All dynamics are integrated with explicit Euler steps at a fixed ``dt``. Actions outside
the declared bounds are clamped, never rejected. Observations are returned raw; no
normalisation happens here.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, ClassVar, NamedTuple

import numpy as np

from ._enums import ComplexityEnum, EnvNameEnum
from .errors import ConfigError, ContractError, ShapeError

if TYPE_CHECKING:
    from ._types import EnvStateTyped

__all__ = (
    "ENVIRONMENTS",
    "CartPoleContinuous",
    "Env",
    "EnvSpec",
    "LinearizablePoly",
    "PendulumSwingUp",
    "StepResult",
    "make_env",
)

_logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    max_episode_steps: int

    def __post_init__(self) -> None:
        if self.state_dim < 1 or self.action_dim < 1 or self.max_episode_steps < 1:
            raise ContractError(f"Environment dimensions must be positive: {self}.")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ShapeError(f"Action bounds do not match action_dim={self.action_dim}.")
        if any(low >= high for low, high in zip(self.action_low, self.action_high, strict=True)):
            raise ContractError(f"Action bounds must satisfy low < high: {self.action_low} / {self.action_high}.")

    @property
    def complexity(self) -> ComplexityEnum:
        size = self.state_dim + self.action_dim
        if size < 10:
            return ComplexityEnum.low
        if size < 20:
            return ComplexityEnum.medium
        return ComplexityEnum.high


class StepResult(NamedTuple):
    next_state: np.ndarray
    reward: float
    terminated: bool
    truncated: bool

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated


class Env(ABC):
    """
    Base class for the native environments.

    Subclasses declare their constructor parameters in :attr:`PARAMS` (name -> default)
    and implement :meth:`_initial_state`, :meth:`_advance` and :meth:`_observe`.

    Parameters
    -----------
    **params: :class:`float`
        Overrides for entries of :attr:`PARAMS`.
    """

    name: ClassVar[EnvNameEnum]
    PARAMS: ClassVar[dict[str, float]]

    spec: EnvSpec

    def __init__(self, **params: float) -> None:
        unknown = sorted(set(params) - set(self.PARAMS))
        if unknown:
            raise ConfigError(f"Unknown parameter(s) for environment {self.name!r}: {', '.join(unknown)}.")
        self.params: dict[str, float] = {**self.PARAMS, **params}
        self._state: np.ndarray = np.zeros(0)
        self._steps: int = 0
        self._needs_reset: bool = True

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.params}>"

    @property
    def steps(self) -> int:
        return self._steps

    def reset(self, seed: int) -> np.ndarray:
        """
        Draw an initial state from the environment's initial distribution under ``seed``.
        """
        rng = np.random.default_rng(seed)
        self._state = self._initial_state(rng)
        self._steps = 0
        self._needs_reset = False
        return self._observe()

    def step(self, action: np.ndarray | list[float] | float) -> StepResult:
        """
        Advance one ``dt``.

        Raises
        -------
        :exc:`ContractError`
            The episode ended (or never started) and :meth:`reset` was not called.
        :exc:`ShapeError`
            The action does not have ``action_dim`` entries.
        """
        if self._needs_reset:
            raise ContractError(f"{type(self).__name__}.step called on a finished episode; call reset first.")
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (self.spec.action_dim,):
            raise ShapeError(f"Expected an action of size {self.spec.action_dim}, got {action.shape}.")
        action = np.clip(action, self.spec.action_low, self.spec.action_high)

        next_state, reward, terminated = self._advance(self._state, action)
        self._state = next_state
        self._steps += 1
        truncated = self._steps >= self.spec.max_episode_steps
        if terminated or truncated:
            self._needs_reset = True
        return StepResult(self._observe(), float(reward), bool(terminated), bool(truncated))

    def get_state(self) -> EnvStateTyped:
        return {
            "name": str(self.name),
            "state": [float(v) for v in self._state],
            "steps": self._steps,
            "needs_reset": self._needs_reset,
        }

    def set_state(self, state: EnvStateTyped) -> None:
        if state["name"] != self.name:
            raise ContractError(f"Environment state for {state['name']!r} cannot be loaded into {self.name!r}.")
        self._state = np.array(state["state"], dtype=np.float64)
        self._steps = int(state["steps"])
        self._needs_reset = bool(state["needs_reset"])

    @abstractmethod
    def _initial_state(self, rng: np.random.Generator) -> np.ndarray: ...

    @abstractmethod
    def _advance(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float, bool]: ...

    def _observe(self) -> np.ndarray:
        return self._state.copy()


class CartPoleContinuous(Env):
    """
    The classic cart-pole with a continuous force in ``[-1, 1]`` scaled to ``+-force_mag`` newtons.

    State is ``(x, x_dot, theta, theta_dot)``. The episode terminates when the pole leaves
    ``+-12`` degrees or the cart leaves ``+-2.4``. Reward is ``+1`` per step.
    """

    name = EnvNameEnum.cartpole
    PARAMS: ClassVar[dict[str, float]] = {
        "dt": 0.02,
        "force_mag": 10.0,
        "gravity": 9.8,
        "masscart": 1.0,
        "masspole": 0.1,
        "length": 0.5,
        "max_episode_steps": 500,
        "reset_noise": 0.05,
    }
    THETA_THRESHOLD: ClassVar[float] = 12 * 2 * math.pi / 360
    X_THRESHOLD: ClassVar[float] = 2.4

    def __init__(self, **params: float) -> None:
        super().__init__(**params)
        self.spec = EnvSpec(4, 1, (-1.0,), (1.0,), int(self.params["max_episode_steps"]))

    def _initial_state(self, rng: np.random.Generator) -> np.ndarray:
        noise = self.params["reset_noise"]
        return rng.uniform(-noise, noise, size=4)

    def _advance(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        p = self.params
        x, x_dot, theta, theta_dot = state
        force = float(action[0]) * p["force_mag"]
        total_mass = p["masscart"] + p["masspole"]
        polemass_length = p["masspole"] * p["length"]
        costheta = math.cos(theta)
        sintheta = math.sin(theta)

        temp = (force + polemass_length * theta_dot**2 * sintheta) / total_mass
        thetaacc = (p["gravity"] * sintheta - costheta * temp) / (
            p["length"] * (4.0 / 3.0 - p["masspole"] * costheta**2 / total_mass)
        )
        xacc = temp - polemass_length * thetaacc * costheta / total_mass

        dt = p["dt"]
        next_state = np.array([x + dt * x_dot, x_dot + dt * xacc, theta + dt * theta_dot, theta_dot + dt * thetaacc])
        terminated = abs(next_state[0]) > self.X_THRESHOLD or abs(next_state[2]) > self.THETA_THRESHOLD
        return next_state, 1.0, terminated


class PendulumSwingUp(Env):
    """
    Torque-limited pendulum swing-up.

    Internal state is ``(theta, theta_dot)``; the observation is ``(cos theta, sin theta, theta_dot)``.
    Reward is ``-(wrap(theta)^2 + 0.1 theta_dot^2 + 0.001 u^2)`` evaluated before the step.
    Angular velocity is clipped to ``+-max_speed``. Never terminates; truncates at ``max_episode_steps``.
    """

    name = EnvNameEnum.pendulum
    PARAMS: ClassVar[dict[str, float]] = {
        "dt": 0.05,
        "gravity": 10.0,
        "mass": 1.0,
        "length": 1.0,
        "max_speed": 8.0,
        "max_torque": 2.0,
        "max_episode_steps": 200,
    }

    def __init__(self, **params: float) -> None:
        super().__init__(**params)
        torque = self.params["max_torque"]
        self.spec = EnvSpec(3, 1, (-torque,), (torque,), int(self.params["max_episode_steps"]))

    @staticmethod
    def wrap_angle(theta: float) -> float:
        return ((theta + math.pi) % (2 * math.pi)) - math.pi

    def _initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])

    def _advance(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        p = self.params
        theta, theta_dot = state
        u = float(action[0])
        reward = -(self.wrap_angle(theta) ** 2 + 0.1 * theta_dot**2 + 0.001 * u**2)

        thetaacc = 3.0 * p["gravity"] / (2.0 * p["length"]) * math.sin(theta) + 3.0 / (p["mass"] * p["length"] ** 2) * u
        next_theta = theta + p["dt"] * theta_dot
        next_theta_dot = float(np.clip(theta_dot + p["dt"] * thetaacc, -p["max_speed"], p["max_speed"]))
        return np.array([next_theta, next_theta_dot]), reward, False

    def _observe(self) -> np.ndarray:
        theta, theta_dot = self._state
        return np.array([math.cos(theta), math.sin(theta), theta_dot])


class LinearizablePoly(Env):
    """
    A polynomial system whose lifted coordinates evolve exactly linearly.

    ``x1' = (1 + dt mu) x1`` and ``x2' = x2 + dt (lam (x2 - x1^2) + u)``.
    Under this Euler rule ``z = (x1, x2, x1^2)`` satisfies ``z' = A_z z + B_z u`` exactly,
    see :meth:`lifted_matrices`. Reward is ``-|x|^2`` of the state before the step.
    """

    name = EnvNameEnum.linpoly
    PARAMS: ClassVar[dict[str, float]] = {
        "mu": -0.05,
        "lam": -1.0,
        "dt": 0.05,
        "action_bound": 2.0,
        "max_episode_steps": 200,
    }

    def __init__(self, **params: float) -> None:
        super().__init__(**params)
        bound = self.params["action_bound"]
        self.spec = EnvSpec(2, 1, (-bound,), (bound,), int(self.params["max_episode_steps"]))

    def _initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=2)

    def _advance(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        p = self.params
        x1, x2 = state
        u = float(action[0])
        next_x1 = (1.0 + p["dt"] * p["mu"]) * x1
        next_x2 = x2 + p["dt"] * (p["lam"] * (x2 - x1 * x1) + u)
        return np.array([next_x1, next_x2]), -float(x1 * x1 + x2 * x2), False

    @staticmethod
    def lift(states: np.ndarray) -> np.ndarray:
        """Map ``(..., 2)`` states to ``(..., 3)`` lifted coordinates ``(x1, x2, x1^2)``."""
        states = np.asarray(states, dtype=np.float64)
        return np.concatenate([states, states[..., :1] ** 2], axis=-1)

    def lifted_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """
        Closed-form ``A_z`` (3x3) and ``B_z`` (3x1) of the lifted linear system.
        """
        dt, mu, lam = self.params["dt"], self.params["mu"], self.params["lam"]
        decay = 1.0 + dt * mu
        a_z = np.array(
            [
                [decay, 0.0, 0.0],
                [0.0, 1.0 + dt * lam, -dt * lam],
                [0.0, 0.0, decay * decay],
            ]
        )
        b_z = np.array([[0.0], [dt], [0.0]])
        return a_z, b_z


ENVIRONMENTS: dict[str, type[Env]] = {
    EnvNameEnum.cartpole: CartPoleContinuous,
    EnvNameEnum.pendulum: PendulumSwingUp,
    EnvNameEnum.linpoly: LinearizablePoly,
}


def make_env(name: str, **params: Any) -> Env:
    """
    Build a registered environment by name.

    Raises
    -------
    :exc:`ConfigError`
        Unknown environment name or parameter.
    """
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ConfigError(f"Unknown environment {name!r}; choose from {', '.join(ENVIRONMENTS)}.") from None
    env = cls(**{key: float(value) for key, value in params.items()})
    _logger.debug("Built environment %s with %s", name, env.params)
    return env
