from __future__ import annotations

import zlib
from typing import TYPE_CHECKING, Any, ClassVar

import numpy as np

from .errors import ContractError

if TYPE_CHECKING:
    from ._types import RngStateTyped

__all__ = ("RngStreams",)


def _to_json(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return {"__array__": value.dtype.str, "values": [int(v) for v in value.tolist()]}
    if isinstance(value, dict):
        return {key: _to_json(item) for key, item in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _from_json(value: Any) -> Any:
    if isinstance(value, dict):
        if "__array__" in value:
            return np.array(value["values"], dtype=np.dtype(value["__array__"]))
        return {key: _from_json(item) for key, item in value.items()}
    return value


class RngStreams:
    """
    Named, independent random substreams derived from one run seed.

    Every stream is a counter-based :class:`numpy.random.Philox` generator keyed by
    ``SeedSequence(seed, spawn_key=(crc32(name),))``. Drawing from one stream never
    moves another, so turning a feature on or off does not perturb the others.

    Parameters
    -----------
    seed: :class:`int`
        The run seed.
    """

    NAMES: ClassVar[tuple[str, ...]] = ("env", "init.koopman", "init.agent", "action", "shuffle", "cte", "probe")

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        stream = self._streams.get(name)
        if stream is None:
            key = zlib.crc32(name.encode("utf-8"))
            sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(key,))
            stream = np.random.Generator(np.random.Philox(sequence))
            self._streams[name] = stream
        return stream

    def get_state(self) -> RngStateTyped:
        for name in self.NAMES:
            self[name]
        return {
            "seed": self.seed,
            "streams": {name: _to_json(gen.bit_generator.state) for name, gen in sorted(self._streams.items())},
        }

    def set_state(self, state: RngStateTyped) -> None:
        if int(state["seed"]) != self.seed:
            raise ContractError(f"RNG state belongs to seed {state['seed']}, not {self.seed}.")
        for name, doc in state["streams"].items():
            self[name].bit_generator.state = _from_json(doc)
