"""Dataset loading: MNIST-format IDX files and CIFAR-10 binary batches.

Both loaders parse the standard on-disk formats byte for byte, validate
sizes before touching pixel data, and report the byte offset where a
malformed file goes wrong. Images come back as float32 [N,C,H,W],
normalized by per-channel statistics of the full training split (cached
next to the data so repeated runs agree).

synthesize_digits writes a self-contained MNIST-format dataset rendered
from the small handwritten-digit corpus bundled with scikit-learn:
8x8 glyphs are upsampled to 28x28 with random affine jitter. Train and
test draw from disjoint glyph pools, so held-out accuracy still means
something. Drop real MNIST files into the data directory and the loader
will read those instead; the format is identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes

DATA_DIR_ENV = "CONDENSE_DATA_DIR"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    name: str
    split: str
    images: np.ndarray  # float32 [N, C, H, W], normalized
    labels: np.ndarray  # int64 [N]
    mean: np.ndarray
    std: np.ndarray
    num_classes: int = 10

    def __len__(self) -> int:
        return self.images.shape[0]


# -- IDX format ------------------------------------------------------------


def read_idx_images(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise DataError(
            f"{path}: truncated header, file ends at offset {len(data)} (need 16)"
        )
    magic = int.from_bytes(data[0:4], "big")
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(
            f"{path}: magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )
    n = int.from_bytes(data[4:8], "big")
    h = int.from_bytes(data[8:12], "big")
    w = int.from_bytes(data[12:16], "big")
    expected = 16 + n * h * w
    if len(data) != expected:
        raise DataError(
            f"{path}: {len(data)} bytes, expected {expected} for {n} images of "
            f"{h}x{w} (mismatch from offset {min(len(data), expected)})"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(n, h, w)


def read_idx_labels(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise DataError(
            f"{path}: truncated header, file ends at offset {len(data)} (need 8)"
        )
    magic = int.from_bytes(data[0:4], "big")
    if magic != IDX_LABELS_MAGIC:
        raise DataError(
            f"{path}: magic 0x{magic:08x} at offset 0, expected 0x{IDX_LABELS_MAGIC:08x}"
        )
    n = int.from_bytes(data[4:8], "big")
    expected = 8 + n
    if len(data) != expected:
        raise DataError(
            f"{path}: {len(data)} bytes, expected {expected} for {n} labels "
            f"(mismatch from offset {min(len(data), expected)})"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=8)


def write_idx_images(path: Path, images: np.ndarray):
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(IDX_IMAGES_MAGIC.to_bytes(4, "big"))
        f.write(n.to_bytes(4, "big"))
        f.write(h.to_bytes(4, "big"))
        f.write(w.to_bytes(4, "big"))
        f.write(images.tobytes())


def write_idx_labels(path: Path, labels: np.ndarray):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(IDX_LABELS_MAGIC.to_bytes(4, "big"))
        f.write(labels.shape[0].to_bytes(4, "big"))
        f.write(labels.tobytes())


# -- CIFAR-10 binary format ------------------------------------------------


def read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if not data or len(data) % CIFAR_RECORD:
        raise DataError(
            f"{path}: {len(data)} bytes is not a multiple of {CIFAR_RECORD}; "
            f"last whole record ends at offset {len(data) - len(data) % CIFAR_RECORD}"
        )
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0]
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise DataError(
            f"{path}: label {labels[bad[0]]} out of range at record {bad[0]} "
            f"(offset {bad[0] * CIFAR_RECORD})"
        )
    images = raw[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


# -- loading ---------------------------------------------------------------


def resolve_data_dir(name: str, path: str | os.PathLike | None = None) -> Path:
    """Directory holding the dataset files.

    Explicit path wins, then $CONDENSE_DATA_DIR, then ./data. A
    per-dataset subdirectory is used when present, otherwise the root
    itself.
    """
    root = Path(path) if path is not None else Path(os.environ.get(DATA_DIR_ENV, "data"))
    sub = root / name
    return sub if sub.is_dir() else root


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise DataError(f"missing dataset file {path} ({hint})")
    return path


def _raw_splits(name: str, root: Path):
    if name == "mnist":
        hint = "MNIST layout; run `condense synth-data` to generate an offline stand-in"
        xtr = read_idx_images(_require(root / MNIST_FILES["train_images"], hint))
        ytr = read_idx_labels(_require(root / MNIST_FILES["train_labels"], hint))
        xte = read_idx_images(_require(root / MNIST_FILES["test_images"], hint))
        yte = read_idx_labels(_require(root / MNIST_FILES["test_labels"], hint))
        xtr = xtr[:, None, :, :]
        xte = xte[:, None, :, :]
    elif name == "cifar10":
        hint = "CIFAR-10 binary layout"
        parts = [read_cifar_file(_require(root / f, hint)) for f in CIFAR_TRAIN_FILES]
        xtr = np.concatenate([p[0] for p in parts])
        ytr = np.concatenate([p[1] for p in parts])
        xte, yte = read_cifar_file(_require(root / CIFAR_TEST_FILE, hint))
    else:
        raise ConfigError(f"unknown dataset {name!r}; expected 'mnist' or 'cifar10'")
    for y, split in ((ytr, "train"), (yte, "test")):
        if y.shape[0] != (xtr if split == "train" else xte).shape[0]:
            raise DataError(f"{name} {split}: image/label counts differ")
    return xtr, ytr, xte, yte


def _train_stats(name: str, root: Path, train_images: np.ndarray):
    """Per-channel mean/std of the scaled training split, cached on disk."""
    cache = root / f"{name}.stats.json"
    if cache.is_file():
        try:
            d = json.loads(cache.read_text())
            return (np.asarray(d["mean"], dtype=np.float32),
                    np.asarray(d["std"], dtype=np.float32))
        except (KeyError, ValueError) as e:
            raise DataError(f"{cache}: unreadable stats cache: {e}") from e
    scaled = train_images.astype(np.float32) / 255.0
    mean = scaled.mean(axis=(0, 2, 3))
    std = scaled.std(axis=(0, 2, 3))
    std = np.maximum(std, 1e-8)
    try:
        cache.write_text(json.dumps({"mean": mean.tolist(), "std": std.tolist()}))
    except OSError:
        pass  # read-only data dir is fine, stats are cheap to recompute
    return mean, std


def _normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = images.astype(np.float32) / 255.0
    x -= mean.reshape(1, -1, 1, 1)
    x /= std.reshape(1, -1, 1, 1)
    return x


def _first_k_per_class(labels: np.ndarray, subset_size: int, classes: int) -> np.ndarray:
    if subset_size % classes:
        raise DataError(
            f"subset size {subset_size} is not a multiple of {classes} classes"
        )
    k = subset_size // classes
    picks = []
    for c in range(classes):
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise DataError(
                f"class {c} has only {idx.size} samples, subset wants {k}"
            )
        picks.append(idx[:k])
    return np.sort(np.concatenate(picks))


def load_dataset(name: str, path: str | os.PathLike | None = None,
                 subset_size: int | None = None,
                 test_subset_size: int | None = None) -> tuple[Dataset, Dataset]:
    """Load a normalized train/test pair.

    subset_size keeps the first k = subset_size/10 samples of each class
    of the training split (file order, deterministic);
    test_subset_size does the same for the test split. Normalization
    statistics always come from the full training split so subsets see
    the same input distribution as full runs.
    """
    root = resolve_data_dir(name, path)
    xtr, ytr, xte, yte = _raw_splits(name, root)
    mean, std = _train_stats(name, root, xtr)
    ntr = _normalize(xtr, mean, std)
    nte = _normalize(xte, mean, std)
    ltr = ytr.astype(np.int64)
    lte = yte.astype(np.int64)
    if subset_size is not None:
        sel = _first_k_per_class(ltr, subset_size, 10)
        ntr, ltr = ntr[sel], ltr[sel]
    if test_subset_size is not None:
        sel = _first_k_per_class(lte, test_subset_size, 10)
        nte, lte = nte[sel], lte[sel]
    train = Dataset(name, "train", ntr, ltr, mean, std)
    test = Dataset(name, "test", nte, lte, mean, std)
    return train, test


# -- batching and augmentation ---------------------------------------------


def batch_indices(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Yield index arrays covering [0, n); shuffled when rng is given.
    The final batch may be smaller."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4,
                  flip: bool = True) -> np.ndarray:
    """Zero-pad by `pad`, crop back at a random offset, optionally
    mirror horizontally with probability 1/2. Expects [N,C,H,W]."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# -- offline digit synthesis -----------------------------------------------


def synthesize_digits(out_dir: str | os.PathLike, train_count: int = 6000,
                      test_count: int = 1500, seed: int = 0) -> Path:
    """Write an MNIST-format digit dataset rendered without a network.

    Source glyphs are the 1797 real handwritten 8x8 digits shipped with
    scikit-learn. Per class, 70% of glyphs feed the training split and
    the remaining 30% the test split, so the splits never share a source
    image. Each sample applies random rotation (+-10 deg), scale, and
    subpixel shift while upsampling to 28x28. Returns the directory the
    four IDX files were written to.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    if train_count % 10 or test_count % 10:
        raise ConfigError("train_count and test_count must be multiples of 10")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    digits = load_digits()
    glyphs = digits.images  # [1797, 8, 8], float 0..16
    labels = digits.target

    pools: dict[str, list[np.ndarray]] = {"train": [], "test": []}
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        cut = int(round(idx.size * 0.7))
        pools["train"].append(idx[:cut])
        pools["test"].append(idx[cut:])

    def render(glyph: np.ndarray) -> np.ndarray:
        angle = rng.uniform(-10.0, 10.0) * np.pi / 180.0
        scale = rng.uniform(2.6, 3.1)  # glyph spans ~21-25 px of the 28 canvas
        shift = rng.uniform(-1.5, 1.5, size=2)
        cosr, sinr = np.cos(angle), np.sin(angle)
        # output-to-input map: rotate about the canvas center, then scale
        # down onto the 8x8 glyph centered at (3.5, 3.5)
        mat = np.array([[cosr, -sinr], [sinr, cosr]]) / scale
        center_out = np.array([13.5, 13.5]) + shift
        offset = np.array([3.5, 3.5]) - mat @ center_out
        img = ndimage.affine_transform(glyph, mat, offset=offset,
                                       output_shape=(28, 28), order=1, cval=0.0)
        img *= rng.uniform(0.82, 1.0) * (255.0 / 16.0)
        return np.clip(img, 0, 255).astype(np.uint8)

    def build_split(split: str, count: int):
        per = count // 10
        imgs = np.empty((count, 28, 28), dtype=np.uint8)
        labs = np.empty(count, dtype=np.uint8)
        i = 0
        for c in range(10):
            pool = pools[split][c]
            for _ in range(per):
                g = glyphs[pool[rng.integers(0, pool.size)]]
                imgs[i] = render(g)
                labs[i] = c
                i += 1
        order = rng.permutation(count)
        return imgs[order], labs[order]

    xtr, ytr = build_split("train", train_count)
    xte, yte = build_split("test", test_count)
    write_idx_images(out / MNIST_FILES["train_images"], xtr)
    write_idx_labels(out / MNIST_FILES["train_labels"], ytr)
    write_idx_images(out / MNIST_FILES["test_images"], xte)
    write_idx_labels(out / MNIST_FILES["test_labels"], yte)
    return out
