from __future__ import annotations

import json
from typing import TYPE_CHECKING

import numpy as np
import pytest
from conftest import small_config

from kippo.checkpoint import VERSION, array_from_doc, dumps_checkpoint, read_checkpoint, tensor_doc, write_checkpoint
from kippo.errors import CheckpointError, CheckpointSchemaError, CheckpointVersionError
from kippo.trainer import Trainer

if TYPE_CHECKING:
    from pathlib import Path

    from kippo._types import CheckpointTyped


@pytest.fixture
def trained() -> Trainer:
    trainer = Trainer(small_config())
    trainer.step_update()
    return trainer


def snapshot(trainer: Trainer) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in trainer.agent_parameters().items()}


def test_save_load_save_is_byte_identical(trained: Trainer, tmp_path: Path) -> None:
    first = tmp_path / "first.json"
    trained.save_checkpoint(first)
    restored = Trainer(small_config())
    restored.load_state(read_checkpoint(first))
    second = tmp_path / "second.json"
    restored.save_checkpoint(second)
    assert first.read_bytes() == second.read_bytes()


def test_keys_are_sorted(trained: Trainer) -> None:
    text = dumps_checkpoint(trained.checkpoint_document())
    assert text == json.dumps(json.loads(text), sort_keys=True, separators=(",", ":")) + "\n"


def test_write_leaves_no_temporary_file(trained: Trainer, tmp_path: Path) -> None:
    path = tmp_path / "nested" / "checkpoint.json"
    write_checkpoint(trained.checkpoint_document(), path)
    assert [p.name for p in path.parent.iterdir()] == ["checkpoint.json"]


def test_version_mismatch_names_both_versions(trained: Trainer, tmp_path: Path) -> None:
    doc = trained.checkpoint_document()
    doc["version"] = VERSION + 1
    path = tmp_path / "checkpoint.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointVersionError) as info:
        read_checkpoint(path)
    assert info.value.found == VERSION + 1
    assert f"version {VERSION + 1}" in str(info.value)
    assert f"version {VERSION}" in str(info.value)


@pytest.mark.parametrize("text", ["{not json", "[]", '{"format": "something-else", "version": 1}'])
def test_corrupt_documents(tmp_path: Path, text: str) -> None:
    path = tmp_path / "checkpoint.json"
    path.write_text(text)
    with pytest.raises(CheckpointSchemaError):
        read_checkpoint(path)


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "absent.json")


@pytest.mark.parametrize("key", ["trainer", "rng", "groups"])
def test_missing_top_level_key(trained: Trainer, tmp_path: Path, key: str) -> None:
    doc = trained.checkpoint_document()
    del doc[key]  # type: ignore[misc]
    path = tmp_path / "checkpoint.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointSchemaError, match=key):
        read_checkpoint(path)


def test_wrong_shape_applies_nothing(trained: Trainer) -> None:
    doc: CheckpointTyped = json.loads(dumps_checkpoint(trained.checkpoint_document()))
    doc["groups"]["koopman"]["K_x"] = tensor_doc(np.zeros((2, 2)))
    fresh = Trainer(small_config())
    before = snapshot(fresh)
    with pytest.raises(CheckpointSchemaError, match="K_x"):
        fresh.load_state(doc)
    for name, array in snapshot(fresh).items():
        np.testing.assert_array_equal(array, before[name])
    assert fresh.update == 0
    assert fresh.cursor is None


def test_mode_mismatch(trained: Trainer) -> None:
    doc = trained.checkpoint_document()
    with pytest.raises(CheckpointSchemaError, match="configuration"):
        Trainer(small_config(kippo=False)).load_state(doc)


def test_tensor_documents() -> None:
    array = np.arange(6.0).reshape(2, 3) / 7
    np.testing.assert_array_equal(array_from_doc(tensor_doc(array), "x"), array)
    with pytest.raises(CheckpointSchemaError):
        array_from_doc({"shape": [2, 2], "data": [1.0]}, "x")
    with pytest.raises(CheckpointSchemaError):
        array_from_doc({"shape": [1], "data": ["a"]}, "x")
