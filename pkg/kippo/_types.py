from __future__ import annotations

from typing import Any, Required, TypedDict


class TensorDocTyped(TypedDict):
    """
    Notes
    ------
    data:
        Flat values in row-major order, ``len(data) == prod(shape)``.
    """

    shape: list[int]
    data: list[float]


class AdamSlotTyped(TypedDict):
    m: TensorDocTyped
    v: TensorDocTyped


class AdamDocTyped(TypedDict):
    t: int
    lr: float
    beta1: float
    beta2: float
    eps: float
    slots: dict[str, AdamSlotTyped]


class RngStateTyped(TypedDict):
    seed: int
    streams: dict[str, dict[str, Any]]


class EnvStateTyped(TypedDict, total=False):
    name: Required[str]
    state: list[float]
    steps: int
    needs_reset: bool


class TrainerStateTyped(TypedDict):
    update: int
    global_step: int
    observation: list[float]
    episode_return: float
    episode_length: int
    ewma: float | None
    probe: TensorDocTyped | None
    probe_latents: TensorDocTyped | None


class CheckpointTyped(TypedDict):
    """
    Notes
    ------
    format:
        Always ``"kippo-checkpoint"``.
    groups:
        ``{"koopman": {...}, "agent": {...}}``; the ``koopman`` group is absent for raw-state PPO runs.
    """

    format: str
    version: int
    config_hash: str
    config: str
    groups: dict[str, dict[str, TensorDocTyped]]
    adam: dict[str, AdamDocTyped]
    rng: RngStateTyped
    env: EnvStateTyped
    trainer: TrainerStateTyped


class MetricsRowTyped(TypedDict, total=False):
    global_step: Required[int]
    episodic_return_mean: float | None
    ewma: float | None
    L_rec: float | None
    L_ls: float | None
    L_ss: float | None
    L_ppo_policy: float | None
    L_ppo_value: float | None
    entropy: float | None
    cte: float | None
    wall_time_s: float | None
    repr_drift: float | None
    clip_fraction: float | None


class CellTyped(TypedDict):
    id: str
    group: str
    seed: int
    overrides: list[str]
    status: str


class ManifestTyped(TypedDict):
    output_root: str
    base_config: str
    parallelism: int
    cells: list[CellTyped]


class ComparisonRowTyped(TypedDict):
    env: str
    complexity: str
    method: str
    mean: float
    sd: float
    pct_mean: float
    pct_sd: float


class AblationRowTyped(TypedDict):
    env: str
    combo: str
    ewma_mean: float
    ewma_sd: float
    cte_mean: float | None
    cte_sd: float | None
