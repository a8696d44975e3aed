from enum import IntEnum, StrEnum


class InitKindEnum(StrEnum):
    xavier_uniform = "xavier_uniform"
    orthogonal = "orthogonal"
    zeros = "zeros"


class EnvNameEnum(StrEnum):
    cartpole = "cartpole"
    pendulum = "pendulum"
    linpoly = "linpoly"


class ComplexityEnum(StrEnum):
    """
    Enums
    ------
    low: str
        ``|S| + |A| < 10``.
    medium: str
        ``10 <= |S| + |A| < 20``.
    high: str
        Everything larger.
    """

    low = "low"
    medium = "medium"
    high = "high"


class MethodEnum(StrEnum):
    kippo = "kippo"
    ppo = "ppo"


class LossTermEnum(StrEnum):
    rec = "rec"
    ls = "ls"
    ss = "ss"


class EwmaConventionEnum(StrEnum):
    """
    Enums
    ------
    printed: str
        ``alpha * prev + (1 - alpha) * G``, the new return dominates.
    swapped: str
        ``(1 - alpha) * prev + alpha * G``, the history dominates.
    """

    printed = "printed"
    swapped = "swapped"


class PredictionNormEnum(StrEnum):
    """
    Enums
    ------
    horizon: str
        Divide the masked sum by the horizon ``H``.
    mask_count: str
        Divide the masked sum by the number of unmasked steps.
    """

    horizon = "horizon"
    mask_count = "mask_count"


class CellStatusEnum(StrEnum):
    pending = "pending"
    done = "done"
    failed = "failed"


class ExitCode(IntEnum):
    ok = 0
    config_error = 1
    runtime_abort = 2
    missing_inputs = 3
