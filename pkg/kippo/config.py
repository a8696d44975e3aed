"""
Run configuration.

Config files are INI documents with one section per concern::

    [run]
    seed = 1
    total_steps = 200000

    [env]
    name = pendulum

    [koopman]
    horizon = 8
    w_rec = 0.5

Every key not declared by a section's dataclass is rejected by ``section.key``. The
``[env]`` section additionally accepts the constructor parameters of the named
environment.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import TYPE_CHECKING, Any, ClassVar, get_type_hints

from ._enums import EnvNameEnum, EwmaConventionEnum, MethodEnum, PredictionNormEnum
from .errors import ConfigError
from .envs import ENVIRONMENTS

if TYPE_CHECKING:
    from collections.abc import Iterable

    from .agent import PpoCoefficients

__all__ = (
    "EnvConfig",
    "KoopmanConfig",
    "MetricsConfig",
    "OutputConfig",
    "PpoConfig",
    "RolloutConfig",
    "RunConfig",
    "TrainConfig",
    "apply_override",
    "config_from_ini",
    "config_hash",
    "config_to_ini",
    "load_config",
    "validate",
)

_logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    seed: int = 1
    total_steps: int = 1_000_000
    kippo: bool = True
    frozen_encoder: bool = False
    output_dir: str = "runs"


@dataclass
class EnvConfig:
    """
    Attributes
    -----------
    name: :class:`EnvNameEnum`
        Registered environment.
    params: :class:`dict[str, float]`
        Constructor overrides, e.g. ``mu`` for the polynomial system.
    """

    name: EnvNameEnum = EnvNameEnum.pendulum
    params: dict[str, float] = field(default_factory=dict)


@dataclass
class RolloutConfig:
    num_steps: int = 2048
    num_minibatches: int = 32
    update_epochs: int = 10


@dataclass
class KoopmanConfig:
    """
    Attributes
    -----------
    latent_dim: :class:`int`
        ``m``; ``0`` derives it from the state dimension.
    action_latent_dim: :class:`int`
        ``k``; ``0`` derives it from the action dimension.
    """

    latent_dim: int = 0
    action_latent_dim: int = 0
    horizon: int = 8
    hidden_layers: int = 2
    hidden_units: int = 128
    w_rec: float = 0.5
    w_ls: float = 0.25
    w_ss: float = 0.5
    prediction_normalization: PredictionNormEnum = PredictionNormEnum.horizon


@dataclass
class PpoConfig:
    learning_rate: float = 3e-4
    anneal_lr: bool = True
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_coef: float = 0.2
    pg_coef: float = 1.0
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    norm_adv: bool = True
    clip_vloss: bool = True
    hidden_layers: int = 2
    hidden_units: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-5


@dataclass
class MetricsConfig:
    ewma_alpha: float = 0.05
    ewma_convention: EwmaConventionEnum = EwmaConventionEnum.printed
    cte_windows: int = 64
    probe_size: int = 64


@dataclass
class OutputConfig:
    record_wall_time: bool = False
    dump_trajectory: bool = False
    checkpoint_interval: int = 0
    check_decoupling: bool = False


@dataclass
class TrainConfig:
    """Everything one training run needs."""

    SECTIONS: ClassVar[tuple[str, ...]] = ("run", "env", "rollout", "koopman", "ppo", "metrics", "output")

    run: RunConfig = field(default_factory=RunConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    koopman: KoopmanConfig = field(default_factory=KoopmanConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def method(self) -> MethodEnum:
        return MethodEnum.kippo if self.run.kippo else MethodEnum.ppo

    @property
    def trains_representation(self) -> bool:
        return self.run.kippo and not self.run.frozen_encoder

    @property
    def num_updates(self) -> int:
        """Policy updates needed to consume ``total_steps``; the last rollout may overshoot by less than one rollout."""
        return math.ceil(self.run.total_steps / self.rollout.num_steps)

    @property
    def minibatch_size(self) -> int:
        return self.rollout.num_steps // self.rollout.num_minibatches

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return self.koopman.w_rec, self.koopman.w_ls, self.koopman.w_ss

    def ppo_coefficients(self) -> PpoCoefficients:
        from .agent import PpoCoefficients

        return PpoCoefficients(
            clip_coef=self.ppo.clip_coef,
            pg_coef=self.ppo.pg_coef,
            vf_coef=self.ppo.vf_coef,
            ent_coef=self.ppo.ent_coef,
            norm_adv=self.ppo.norm_adv,
            clip_vloss=self.ppo.clip_vloss,
        )


def _convert(kind: Any, raw: str, where: str) -> Any:
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(text)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if isinstance(kind, type) and issubclass(kind, StrEnum):
            return kind(text)
    except ValueError:
        raise ConfigError(f"Invalid value for {where}: {raw!r}.") from None
    return text


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _set_key(config: TrainConfig, section: str, key: str, raw: str) -> tuple[Any, Any]:
    """Convert and assign one value; returns ``(old, new)``."""
    where = f"{section}.{key}"
    if section not in TrainConfig.SECTIONS:
        raise ConfigError(f"Unknown config section [{section}] (in {where}).")
    target = getattr(config, section)
    if section == "env" and key != "name":
        cls = ENVIRONMENTS.get(config.env.name)
        if cls is None or key not in cls.PARAMS:
            raise ConfigError(f"Unknown config key {where}.")
        old = config.env.params.get(key)
        new = _convert(float, raw, where)
        config.env.params[key] = new
        return old, new
    hints = get_type_hints(type(target))
    if key not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"Unknown config key {where}.")
    old = getattr(target, key)
    new = _convert(hints[key], raw, where)
    setattr(target, key, new)
    return old, new


def config_from_ini(text: str) -> TrainConfig:
    """
    Parse an INI document into a :class:`TrainConfig`.

    Raises
    -------
    :exc:`ConfigError`
        Malformed document, unknown section or key, or an unconvertible value.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment, method-assign]
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"Could not parse config: {exc}") from exc
    config = TrainConfig()
    # name first so environment parameters are checked against the right class
    if parser.has_option("env", "name"):
        _set_key(config, "env", "name", parser.get("env", "name"))
    for section in parser.sections():
        for key, raw in parser.items(section):
            if (section, key) != ("env", "name"):
                _set_key(config, section, key, raw)
    return config


def apply_override(config: TrainConfig, override: str) -> None:
    """
    Apply one ``section.key=value`` override in place and log it.

    Raises
    -------
    :exc:`ConfigError`
        The override is malformed or names an unknown key.
    """
    target, sep, raw = override.partition("=")
    section, dot, key = target.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigError(f"Override {override!r} must look like section.key=value.")
    if (section, key) == ("env", "name") and raw.strip() != config.env.name:
        config.env.params.clear()
    old, new = _set_key(config, section, key, raw)
    _logger.info("Config override %s.%s: %s -> %s", section, key, old, new)


def load_config(path: Path | None = None, overrides: Iterable[str] = ()) -> TrainConfig:
    """
    Read ``path`` (or start from defaults), apply ``overrides`` in order and validate.

    Raises
    -------
    :exc:`ConfigError`
        Anything wrong with the file, an override or the resulting values.
    """
    if path is None:
        config = TrainConfig()
    else:
        if not path.exists():
            raise ConfigError(f"Config file {path} does not exist.")
        config = config_from_ini(path.read_text(encoding="utf-8"))
        _logger.debug("Loaded config from %s", path)
    for override in overrides:
        apply_override(config, override)
    validate(config)
    return config


def validate(config: TrainConfig) -> None:
    """
    Check cross-field invariants.

    Raises
    -------
    :exc:`ConfigError`
        The first violated invariant, naming the offending key.
    """
    checks: list[tuple[bool, str]] = [
        (config.run.total_steps >= 1, "run.total_steps must be at least 1"),
        (config.run.kippo or not config.run.frozen_encoder, "run.frozen_encoder requires run.kippo = true"),
        (config.rollout.num_steps >= 1, "rollout.num_steps must be at least 1"),
        (config.rollout.num_minibatches >= 1, "rollout.num_minibatches must be at least 1"),
        (
            config.rollout.num_steps % max(config.rollout.num_minibatches, 1) == 0,
            "rollout.num_steps must be divisible by rollout.num_minibatches",
        ),
        (config.rollout.update_epochs >= 1, "rollout.update_epochs must be at least 1"),
        (config.koopman.horizon >= 1, "koopman.horizon must be at least 1"),
        (config.koopman.horizon < config.rollout.num_steps, "koopman.horizon must be below rollout.num_steps"),
        (min(config.loss_weights) >= 0, "koopman loss weights must be non-negative"),
        (config.koopman.latent_dim >= 0, "koopman.latent_dim must be non-negative"),
        (config.koopman.action_latent_dim >= 0, "koopman.action_latent_dim must be non-negative"),
        (config.koopman.hidden_layers >= 1, "koopman.hidden_layers must be at least 1"),
        (config.koopman.hidden_units >= 1, "koopman.hidden_units must be at least 1"),
        (config.ppo.learning_rate > 0, "ppo.learning_rate must be positive"),
        (0.0 <= config.ppo.gamma <= 1.0, "ppo.gamma must lie in [0, 1]"),
        (0.0 <= config.ppo.gae_lambda <= 1.0, "ppo.gae_lambda must lie in [0, 1]"),
        (config.ppo.clip_coef > 0, "ppo.clip_coef must be positive"),
        (config.ppo.max_grad_norm > 0, "ppo.max_grad_norm must be positive"),
        (config.ppo.hidden_layers >= 1, "ppo.hidden_layers must be at least 1"),
        (config.ppo.hidden_units >= 1, "ppo.hidden_units must be at least 1"),
        (0.0 <= config.ppo.adam_beta1 < 1.0 and 0.0 <= config.ppo.adam_beta2 < 1.0, "ppo Adam betas must lie in [0, 1)"),
        (config.ppo.adam_eps > 0, "ppo.adam_eps must be positive"),
        (0.0 <= config.metrics.ewma_alpha <= 1.0, "metrics.ewma_alpha must lie in [0, 1]"),
        (config.metrics.cte_windows >= 0, "metrics.cte_windows must be non-negative"),
        (config.metrics.probe_size >= 1, "metrics.probe_size must be at least 1"),
        (config.output.checkpoint_interval >= 0, "output.checkpoint_interval must be non-negative"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message + ".")
    if config.koopman.latent_dim:
        state_dim = ENVIRONMENTS[config.env.name](**config.env.params).spec.state_dim
        if config.koopman.latent_dim < state_dim:
            raise ConfigError(
                f"koopman.latent_dim={config.koopman.latent_dim} is below the state dimension {state_dim} "
                f"of {config.env.name}."
            )


def config_to_ini(config: TrainConfig, *, include_output_dir: bool = True) -> str:
    """Render ``config`` as INI text; equal configs render to identical text."""
    lines: list[str] = []
    for section in TrainConfig.SECTIONS:
        lines.append(f"[{section}]")
        target = getattr(config, section)
        if section == "env":
            lines.append(f"name = {config.env.name}")
            lines.extend(f"{key} = {_render(float(value))}" for key, value in sorted(config.env.params.items()))
        else:
            for item in dataclasses.fields(target):
                if (section, item.name) == ("run", "output_dir") and not include_output_dir:
                    continue
                lines.append(f"{item.name} = {_render(getattr(target, item.name))}")
        lines.append("")
    return "\n".join(lines)


def config_hash(config: TrainConfig) -> str:
    """SHA-256 of the rendered config, ignoring ``run.output_dir``."""
    return hashlib.sha256(config_to_ini(config, include_output_dir=False).encode("utf-8")).hexdigest()
