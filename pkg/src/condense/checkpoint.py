"""Checkpoint container: JSON header plus raw little-endian tensor data.

Layout:

    bytes 0:4    magic b"CNDS"
    bytes 4:8    format version, uint32 little-endian
    bytes 8:16   header length in bytes, uint64 little-endian
    header       UTF-8 JSON
    payload      tensor buffers, back to back

The header carries the model configuration, the training position
(epoch, total epochs, RNG state), which form the tensors describe
("train" or "test"), and a directory of name/dtype/shape/offset for
every buffer. Loading validates magic, version, and every directory
entry against the actual file size before reading tensor bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arch import LgcNet, ModelConfig
from .convert import ConvertedLgcNet
from .errors import DataError

MAGIC = b"CNDS"
VERSION = 1


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray]

    @property
    def form(self) -> str:
        return self.header["form"]

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.header["model_config"])


def _le_dtype(arr: np.ndarray) -> str:
    return np.dtype(arr.dtype).newbyteorder("<").str


def save_checkpoint(path: str | Path, header: dict,
                    arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    directory = []
    offset = 0
    buffers = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(_le_dtype(arr), copy=False)
        raw = le.tobytes()
        directory.append({
            "name": name,
            "dtype": _le_dtype(arr),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        buffers.append(raw)
        offset += len(raw)
    full_header = dict(header)
    full_header["format_version"] = VERSION
    full_header["tensors"] = directory
    encoded = json.dumps(full_header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(VERSION.to_bytes(4, "little"))
        f.write(len(encoded).to_bytes(8, "little"))
        f.write(encoded)
        for raw in buffers:
            f.write(raw)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if len(data) < 16:
        raise DataError(f"{path}: truncated at offset {len(data)}, need 16 header bytes")
    if data[:4] != MAGIC:
        raise DataError(
            f"{path}: magic {data[:4]!r} at offset 0, expected {MAGIC!r}"
        )
    version = int.from_bytes(data[4:8], "little")
    if version != VERSION:
        raise DataError(f"{path}: format version {version}, this build reads {VERSION}")
    hlen = int.from_bytes(data[8:16], "little")
    if 16 + hlen > len(data):
        raise DataError(
            f"{path}: header claims {hlen} bytes but file ends at offset {len(data)}"
        )
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: unreadable header: {e}") from e
    base = 16 + hlen
    arrays = {}
    for ent in header.get("tensors", []):
        start = base + ent["offset"]
        stop = start + ent["nbytes"]
        if stop > len(data):
            raise DataError(
                f"{path}: tensor {ent['name']!r} runs to offset {stop} "
                f"but file ends at {len(data)}"
            )
        arr = np.frombuffer(data[start:stop], dtype=np.dtype(ent["dtype"]))
        expected = int(np.prod(ent["shape"], dtype=np.int64)) if ent["shape"] else 1
        if arr.size != expected:
            raise DataError(
                f"{path}: tensor {ent['name']!r} holds {arr.size} items, "
                f"shape {ent['shape']} wants {expected}"
            )
        arrays[ent["name"]] = arr.reshape(ent["shape"]).copy()
    return Checkpoint(header, arrays)


# -- model-aware helpers ---------------------------------------------------


def model_header(model, form: str, **extra) -> dict:
    h = {
        "form": form,
        "model_config": model.config.to_dict(),
        "dtype": np.dtype(model.dtype).name,
    }
    if form == "test" and isinstance(model, ConvertedLgcNet):
        h["fc_keep"] = model.fc_keep
    h.update(extra)
    return h


def save_model(path: str | Path, model, form: str, optimizer=None,
               optimizer_names: list[str] | None = None, **extra) -> Path:
    arrays = dict(model.state_dict())
    if optimizer is not None:
        arrays.update(optimizer.state_arrays(optimizer_names))
    return save_checkpoint(path, model_header(model, form, **extra), arrays)


def restore_model(ckpt: Checkpoint):
    """Rebuild the network a checkpoint describes and load its tensors.

    Training-form checkpoints come back in train mode, converted ones in
    eval mode. Optimizer state stays in ckpt.arrays under "optim/".
    """
    cfg = ckpt.config
    dtype = np.dtype(ckpt.header.get("dtype", "float32"))
    if ckpt.form == "train":
        model = LgcNet(cfg, np.random.default_rng(0), dtype=dtype, init="zeros")
    elif ckpt.form == "test":
        total = cfg.total_channels
        fc_keep = ckpt.header.get("fc_keep", total)
        model = ConvertedLgcNet(cfg, fc_keep=None if fc_keep == total else fc_keep,
                                dtype=dtype)
    else:
        raise DataError(f"checkpoint form {ckpt.form!r} is not 'train' or 'test'")
    model_arrays = {k: v for k, v in ckpt.arrays.items() if not k.startswith("optim/")}
    model.load_state_dict(model_arrays)
    if ckpt.form == "test":
        model.eval()
    return model
