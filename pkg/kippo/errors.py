from __future__ import annotations

from typing import Any

__all__ = (
    "BudgetMismatchError",
    "CheckpointError",
    "CheckpointSchemaError",
    "CheckpointVersionError",
    "ConfigError",
    "ContractError",
    "KippoError",
    "MissingRunsError",
    "NonFiniteError",
    "PlotFormatError",
    "ShapeError",
)


class KippoError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(KippoError, ValueError):
    """An operand or layer received an array of the wrong shape."""


class ContractError(KippoError, RuntimeError):
    """
    A documented precondition was violated.

    Raised for backward on a non-scalar, a gradient slot that was not reset before
    backward, a parameter without gradient handed to the optimizer, an orthogonal
    init on a non-square matrix, or stepping a finished episode.
    """


class NonFiniteError(KippoError, FloatingPointError):
    """
    A NaN or infinite value was detected.

    Parameters
    -----------
    message: :class:`str`
        Human readable description.
    diagnostic: :class:`dict`, optional
        Extra context written alongside an aborted run.
    """

    def __init__(self, message: str, diagnostic: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.diagnostic: dict[str, Any] = diagnostic or {}


class ConfigError(KippoError, ValueError):
    """A config file or override could not be parsed or validated."""


class CheckpointError(KippoError, ValueError):
    """A checkpoint could not be written or read."""


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: object, expected: object) -> None:
        super().__init__(f"Checkpoint version mismatch: file has version {found}, this build reads version {expected}.")
        self.found = found
        self.expected = expected


class CheckpointSchemaError(CheckpointError):
    """The checkpoint document is corrupt or does not match the schema."""


class MissingRunsError(KippoError, FileNotFoundError):
    """
    Completed runs required by an aggregation step are missing.

    Parameters
    -----------
    cells: :class:`list[str]`
        The identifiers of the missing cells.
    """

    def __init__(self, cells: list[str]) -> None:
        super().__init__("Missing runs: " + ", ".join(cells))
        self.cells = cells


class BudgetMismatchError(KippoError, ValueError):
    """Runs being compared used different environments or step budgets."""


class PlotFormatError(KippoError, ValueError):
    """An emitted plot file is not well-formed SVG."""
