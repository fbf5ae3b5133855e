"""Checkpoint container: byte-level format checks and model restore."""

import numpy as np
import pytest

from condense.checkpoint import (MAGIC, load_checkpoint, restore_model,
                                 save_checkpoint, save_model)
from condense.convert import ConvertedLgcNet, convert_model
from condense.errors import DataError

from conftest import state_identical


def test_save_load_round_trip(tmp_path):
    arrays = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([1.5], dtype=np.float64),
        "c": np.arange(4, dtype=np.int64),
    }
    path = save_checkpoint(tmp_path / "x.ckpt", {"note": "hi"}, arrays)
    ckpt = load_checkpoint(path)
    assert ckpt.header["note"] == "hi"
    for k, v in arrays.items():
        assert ckpt.arrays[k].dtype == v.dtype
        assert np.array_equal(ckpt.arrays[k], v)


def test_magic_and_version_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "x.ckpt", {}, {"a": np.zeros(2)})
    raw = bytearray(path.read_bytes())
    assert raw[:4] == MAGIC

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError):
        load_checkpoint(bad)

    wrong_version = bytearray(raw)
    wrong_version[4:8] = (99).to_bytes(4, "little")
    bad.write_bytes(wrong_version)
    with pytest.raises(DataError):
        load_checkpoint(bad)


def test_truncated_payload_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "x.ckpt", {}, {"a": np.zeros(100)})
    raw = path.read_bytes()
    bad = tmp_path / "short.ckpt"
    bad.write_bytes(raw[:-40])
    with pytest.raises(DataError):
        load_checkpoint(bad)
    bad.write_bytes(raw[:10])
    with pytest.raises(DataError):
        load_checkpoint(bad)


def test_restore_train_form(micro_run, tmp_path):
    model = micro_run.model
    path = save_model(tmp_path / "m.ckpt", model, form="train", epoch=4)
    ckpt = load_checkpoint(path)
    assert ckpt.form == "train"
    assert ckpt.header["epoch"] == 4
    back = restore_model(ckpt)
    assert back.training
    assert state_identical(back.state_dict(), model.state_dict())


def test_restore_converted_form(micro_run, tmp_path):
    micro_run.model.eval()
    converted = convert_model(micro_run.model)
    path = save_model(tmp_path / "c.ckpt", converted, form="test")
    back = restore_model(load_checkpoint(path))
    assert isinstance(back, ConvertedLgcNet)
    assert not back.training
    assert state_identical(back.state_dict(), converted.state_dict())


def test_restore_rejects_unknown_form(micro_run, tmp_path):
    path = save_model(tmp_path / "m.ckpt", micro_run.model, form="train")
    ckpt = load_checkpoint(path)
    ckpt.header["form"] = "weird"
    with pytest.raises(DataError):
        restore_model(ckpt)


def test_optimizer_state_kept_separate(micro_run):
    ckpt = load_checkpoint(micro_run.checkpoint_path)
    optim_keys = [k for k in ckpt.arrays if k.startswith("optim/")]
    model_keys = [k for k in ckpt.arrays if not k.startswith("optim/")]
    assert optim_keys and model_keys
    assert ckpt.header["rng_state"]["bit_generator"] == "PCG64"
