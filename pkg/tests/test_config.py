from __future__ import annotations

import logging
from typing import TYPE_CHECKING

import pytest

from kippo._enums import EnvNameEnum, MethodEnum, PredictionNormEnum
from kippo.config import (
    TrainConfig,
    apply_override,
    config_from_ini,
    config_hash,
    config_to_ini,
    load_config,
    validate,
)
from kippo.errors import ConfigError

if TYPE_CHECKING:
    from pathlib import Path


def test_defaults() -> None:
    config = TrainConfig()
    assert config.run.total_steps == 1_000_000
    assert config.rollout.num_steps == 2048
    assert config.minibatch_size == 64
    assert config.loss_weights == (0.5, 0.25, 0.5)
    assert config.koopman.horizon == 8
    assert config.method is MethodEnum.kippo
    assert config.num_updates == 489
    validate(config)


def test_ini_round_trip() -> None:
    text = """
[run]
seed = 3
kippo = false

[env]
name = linpoly
mu = -0.1

[koopman]
prediction_normalization = mask_count
w_ls = 0.75
"""
    config = config_from_ini(text)
    assert config.run.seed == 3
    assert config.method is MethodEnum.ppo
    assert config.env.name is EnvNameEnum.linpoly
    assert config.env.params == {"mu": -0.1}
    assert config.koopman.prediction_normalization is PredictionNormEnum.mask_count
    assert config.koopman.w_ls == 0.75
    assert config_to_ini(config_from_ini(config_to_ini(config))) == config_to_ini(config)


@pytest.mark.parametrize(
    ("text", "match"),
    [
        ("[bogus]\nkey = 1\n", r"\[bogus\]"),
        ("[run]\nseeds = 1\n", "run.seeds"),
        ("[run]\nseed = one\n", "run.seed"),
        ("[run]\nkippo = maybe\n", "run.kippo"),
        ("[env]\nname = pendulum\nmu = 1\n", "env.mu"),
        ("[env]\nname = walker\n", "env.name"),
        ("not an ini file", "parse"),
    ],
)
def test_rejects_bad_documents(text: str, match: str) -> None:
    with pytest.raises(ConfigError, match=match):
        config_from_ini(text)


def test_override_precedence_and_logging(tmp_path: Path, caplog: pytest.LogCaptureFixture) -> None:
    path = tmp_path / "run.ini"
    path.write_text("[koopman]\nhorizon = 4\n", encoding="utf-8")
    with caplog.at_level(logging.INFO, logger="kippo.config"):
        config = load_config(path, ["koopman.horizon=6", "koopman.horizon=2"])
    assert config.koopman.horizon == 2
    assert "koopman.horizon: 4 -> 6" in caplog.text
    assert "koopman.horizon: 6 -> 2" in caplog.text


def test_env_override_clears_parameters() -> None:
    config = config_from_ini("[env]\nname = linpoly\nmu = -0.2\n")
    apply_override(config, "env.name=pendulum")
    assert config.env.params == {}
    apply_override(config, "env.max_episode_steps=50")
    assert config.env.params == {"max_episode_steps": 50.0}


@pytest.mark.parametrize("override", ["horizon=2", "koopman.horizon", "koopman.=3"])
def test_malformed_override(override: str) -> None:
    with pytest.raises(ConfigError):
        apply_override(TrainConfig(), override)


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "nope.ini")


@pytest.mark.parametrize(
    ("override", "match"),
    [
        ("rollout.num_minibatches=30", "divisible"),
        ("koopman.horizon=0", "horizon"),
        ("koopman.w_ss=-0.1", "weights"),
        ("metrics.ewma_alpha=1.5", "ewma_alpha"),
        ("run.frozen_encoder=true", "frozen_encoder"),
        ("koopman.latent_dim=2", "state dimension"),
    ],
)
def test_validation(override: str, match: str) -> None:
    config = TrainConfig()
    if override.startswith("run.frozen"):
        config.run.kippo = False
    apply_override(config, override)
    with pytest.raises(ConfigError, match=match):
        validate(config)


def test_hash_ignores_output_dir() -> None:
    first, second = TrainConfig(), TrainConfig()
    second.run.output_dir = "elsewhere"
    assert config_hash(first) == config_hash(second)
    second.run.seed = 2
    assert config_hash(first) != config_hash(second)


def test_ppo_coefficients() -> None:
    config = TrainConfig()
    config.ppo.ent_coef = 0.01
    coefs = config.ppo_coefficients()
    assert coefs.ent_coef == 0.01
    assert coefs.clip_coef == 0.2


def test_frozen_encoder_mode() -> None:
    config = TrainConfig()
    config.run.frozen_encoder = True
    assert config.method is MethodEnum.kippo
    assert not config.trains_representation
