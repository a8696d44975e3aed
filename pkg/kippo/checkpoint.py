"""
Checkpoint documents.

A checkpoint is one JSON document with sorted keys. Floats are written with their
shortest round-tripping representation, so save -> load -> save reproduces the same
bytes. Documents are fully validated by :func:`read_checkpoint` before a caller applies
any part of them.
"""

from __future__ import annotations

import json
import logging
import os
from typing import TYPE_CHECKING, Any

import numpy as np

from .diffcore import AdamState
from .errors import CheckpointError, CheckpointSchemaError, CheckpointVersionError

if TYPE_CHECKING:
    from pathlib import Path

    from ._types import AdamDocTyped, CheckpointTyped, TensorDocTyped
    from .diffcore import Adam, Tensor

__all__ = (
    "FORMAT",
    "VERSION",
    "adam_from_doc",
    "adam_to_doc",
    "array_from_doc",
    "dumps_checkpoint",
    "params_from_doc",
    "params_to_doc",
    "read_checkpoint",
    "tensor_doc",
    "write_checkpoint",
)

_logger = logging.getLogger(__name__)

FORMAT = "kippo-checkpoint"
VERSION = 1

_TOP_LEVEL = ("adam", "config", "config_hash", "env", "format", "groups", "rng", "trainer", "version")
_TRAINER_KEYS = (
    "episode_length",
    "episode_return",
    "ewma",
    "global_step",
    "observation",
    "probe",
    "probe_latents",
    "update",
)


def tensor_doc(array: np.ndarray) -> TensorDocTyped:
    array = np.asarray(array, dtype=np.float64)
    return {"shape": list(array.shape), "data": [float(v) for v in array.reshape(-1)]}


def array_from_doc(doc: Any, where: str) -> np.ndarray:
    """
    Raises
    -------
    :exc:`CheckpointSchemaError`
        ``doc`` is not a ``{"shape", "data"}`` mapping with consistent sizes.
    """
    if not isinstance(doc, dict) or set(doc) != {"shape", "data"}:
        raise CheckpointSchemaError(f"{where}: expected a tensor document with 'shape' and 'data'.")
    shape, data = doc["shape"], doc["data"]
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise CheckpointSchemaError(f"{where}: invalid shape {shape!r}.")
    if not isinstance(data, list) or len(data) != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointSchemaError(f"{where}: data does not match shape {shape}.")
    try:
        return np.array(data, dtype=np.float64).reshape(shape)
    except (TypeError, ValueError) as exc:
        raise CheckpointSchemaError(f"{where}: non-numeric tensor data.") from exc


def params_to_doc(params: dict[str, Tensor]) -> dict[str, TensorDocTyped]:
    return {name: tensor_doc(tensor.data) for name, tensor in params.items()}


def params_from_doc(doc: Any, params: dict[str, Tensor], where: str) -> dict[str, np.ndarray]:
    """Validated arrays for every parameter in ``params``; nothing is assigned."""
    if not isinstance(doc, dict) or set(doc) != set(params):
        found = sorted(doc) if isinstance(doc, dict) else doc
        raise CheckpointSchemaError(f"{where}: parameter names {found} do not match {sorted(params)}.")
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in params.items():
        array = array_from_doc(doc[name], f"{where}.{name}")
        if array.shape != tensor.shape:
            raise CheckpointSchemaError(f"{where}.{name}: shape {array.shape} does not match {tensor.shape}.")
        arrays[name] = array
    return arrays


def adam_to_doc(optimizer: Adam, names: list[str]) -> AdamDocTyped:
    state = optimizer.state
    slots = {
        name: {"m": tensor_doc(m), "v": tensor_doc(v)} for name, m, v in zip(names, state.m, state.v, strict=False)
    }
    return {"t": state.t, "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "slots": slots}


def adam_from_doc(doc: Any, params: dict[str, Tensor], where: str) -> AdamState:
    """A validated :class:`AdamState` whose moments follow the order of ``params``."""
    required = {"t", "lr", "beta1", "beta2", "eps", "slots"}
    if not isinstance(doc, dict) or set(doc) != required:
        raise CheckpointSchemaError(f"{where}: expected keys {sorted(required)}.")
    if not isinstance(doc["t"], int) or doc["t"] < 0:
        raise CheckpointSchemaError(f"{where}.t: invalid step counter {doc['t']!r}.")
    slots = doc["slots"]
    if not isinstance(slots, dict) or (slots and set(slots) != set(params)):
        raise CheckpointSchemaError(f"{where}.slots: moments do not cover the parameter group.")
    m: list[np.ndarray] = []
    v: list[np.ndarray] = []
    for name, tensor in params.items() if slots else ():
        slot = slots[name]
        if not isinstance(slot, dict) or set(slot) != {"m", "v"}:
            raise CheckpointSchemaError(f"{where}.slots.{name}: expected 'm' and 'v'.")
        first = array_from_doc(slot["m"], f"{where}.slots.{name}.m")
        second = array_from_doc(slot["v"], f"{where}.slots.{name}.v")
        if first.shape != tensor.shape or second.shape != tensor.shape:
            raise CheckpointSchemaError(f"{where}.slots.{name}: moment shapes do not match {tensor.shape}.")
        m.append(first)
        v.append(second)
    try:
        return AdamState(
            lr=float(doc["lr"]), beta1=float(doc["beta1"]), beta2=float(doc["beta2"]), eps=float(doc["eps"]),
            t=doc["t"], m=m, v=v,
        )
    except (TypeError, ValueError) as exc:
        raise CheckpointSchemaError(f"{where}: invalid hyperparameters.") from exc


def dumps_checkpoint(doc: CheckpointTyped) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def write_checkpoint(doc: CheckpointTyped, path: Path) -> None:
    """Write atomically: the target is either the old file or the complete new one."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps_checkpoint(doc), encoding="utf-8")
    os.replace(tmp, path)
    _logger.debug("Wrote checkpoint %s", path)


def read_checkpoint(path: Path) -> CheckpointTyped:
    """
    Load and structurally validate a checkpoint document.

    Raises
    -------
    :exc:`CheckpointVersionError`
        The document was written by a different format version.
    :exc:`CheckpointSchemaError`
        The file is not JSON or a required field is missing or malformed.
    :exc:`CheckpointError`
        The file cannot be read.
    """
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointSchemaError(f"Checkpoint {path} is not valid JSON: {exc.msg}.") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointSchemaError(f"{path} is not a {FORMAT} document.")
    if doc.get("version") != VERSION:
        raise CheckpointVersionError(doc.get("version"), VERSION)
    missing = [key for key in _TOP_LEVEL if key not in doc]
    if missing:
        raise CheckpointSchemaError(f"Checkpoint {path} is missing {', '.join(missing)}.")
    if not isinstance(doc["config"], str) or not isinstance(doc["config_hash"], str):
        raise CheckpointSchemaError(f"Checkpoint {path} has a malformed config block.")
    for key in ("groups", "adam", "rng", "env", "trainer"):
        if not isinstance(doc[key], dict):
            raise CheckpointSchemaError(f"Checkpoint {path}: '{key}' must be an object.")
    if "agent" not in doc["groups"] or "agent" not in doc["adam"] or not set(doc["adam"]) <= set(doc["groups"]):
        raise CheckpointSchemaError(f"Checkpoint {path}: optimizer states do not match parameter groups.")
    trainer = doc["trainer"]
    missing = [key for key in _TRAINER_KEYS if key not in trainer]
    if missing:
        raise CheckpointSchemaError(f"Checkpoint {path}: trainer state is missing {', '.join(missing)}.")
    if not isinstance(doc["rng"].get("streams"), dict) or "seed" not in doc["rng"]:
        raise CheckpointSchemaError(f"Checkpoint {path}: malformed RNG state.")
    if "name" not in doc["env"]:
        raise CheckpointSchemaError(f"Checkpoint {path}: environment state has no name.")
    return doc  # type: ignore[return-value]
