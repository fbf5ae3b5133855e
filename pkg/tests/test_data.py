"""Data pipeline: IDX round trips, normalization, subsets, augmentation."""

import numpy as np
import pytest

from condense.data import (Dataset, augment_batch, batch_indices,
                           load_dataset, read_idx_images, read_idx_labels,
                           resolve_data_dir, synthesize_digits,
                           write_idx_images, write_idx_labels)
from condense.errors import ConfigError, DataError


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(7, 9, 11), dtype=np.uint8)
    labels = rng.integers(0, 10, size=7, dtype=np.uint8)
    write_idx_images(tmp_path / "im.idx", images)
    write_idx_labels(tmp_path / "lb.idx", labels)
    assert np.array_equal(read_idx_images(tmp_path / "im.idx"), images)
    assert np.array_equal(read_idx_labels(tmp_path / "lb.idx"), labels)


def test_idx_reader_rejects_garbage(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(b"\x00" * 8)
    with pytest.raises(DataError):
        read_idx_images(p)
    # header promises 2 images of 28x28 but carries no payload
    p.write_bytes(b"\x00\x00\x08\x03"
                  + (2).to_bytes(4, "big")
                  + (28).to_bytes(4, "big")
                  + (28).to_bytes(4, "big"))
    with pytest.raises(DataError):
        read_idx_images(p)


def test_missing_dataset_dir_message(tmp_path):
    with pytest.raises(DataError):
        load_dataset("mnist", path=tmp_path / "absent")
    with pytest.raises(ConfigError):
        load_dataset("imagenet", path=tmp_path)


def test_resolve_data_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CONDENSE_DATA_DIR", str(tmp_path))
    assert resolve_data_dir("mnist") == tmp_path


def test_synthesized_digits_load_and_normalize(digits_dir):
    train, test = load_dataset("mnist", path=digits_dir)
    assert isinstance(train, Dataset)
    assert train.images.shape == (600, 1, 28, 28)
    assert test.images.shape == (200, 1, 28, 28)
    assert train.images.dtype == np.float32
    # stats come from the train split, so it is centered after scaling
    assert abs(train.images.mean()) < 1e-4
    assert abs(train.images.std() - 1) < 1e-3
    assert np.array_equal(train.mean, test.mean)
    assert sorted(np.unique(train.labels)) == list(range(10))


def test_splits_are_class_balanced(digits_dir):
    train, test = load_dataset("mnist", path=digits_dir)
    assert np.bincount(train.labels).tolist() == [60] * 10
    assert np.bincount(test.labels).tolist() == [20] * 10


def test_subset_selection_deterministic(digits_dir):
    a, _ = load_dataset("mnist", path=digits_dir, subset_size=100)
    b, _ = load_dataset("mnist", path=digits_dir, subset_size=100)
    assert len(a) == 100
    assert np.bincount(a.labels).tolist() == [10] * 10
    assert np.array_equal(a.images, b.images)


def test_subset_size_must_be_divisible(digits_dir):
    with pytest.raises(DataError):
        load_dataset("mnist", path=digits_dir, subset_size=105)


def test_synthesis_is_seed_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    synthesize_digits(a, train_count=50, test_count=20, seed=11)
    synthesize_digits(b, train_count=50, test_count=20, seed=11)
    ia = read_idx_images(a / "train-images-idx3-ubyte")
    ib = read_idx_images(b / "train-images-idx3-ubyte")
    assert np.array_equal(ia, ib)
    c = tmp_path / "c"
    synthesize_digits(c, train_count=50, test_count=20, seed=12)
    ic = read_idx_images(c / "train-images-idx3-ubyte")
    assert not np.array_equal(ia, ic)


def test_batch_indices_cover_everything():
    seen = np.concatenate(list(batch_indices(10, 3)))
    assert sorted(seen) == list(range(10))
    rng = np.random.default_rng(0)
    shuffled = np.concatenate(list(batch_indices(10, 3, rng)))
    assert sorted(shuffled) == list(range(10))
    with pytest.raises(ConfigError):
        list(batch_indices(10, 0))


def test_augment_deterministic_and_shape():
    rng = np.random.default_rng(5)
    images = rng.standard_normal((6, 1, 28, 28)).astype(np.float32)
    out1 = augment_batch(images, np.random.default_rng(9), flip=False)
    out2 = augment_batch(images, np.random.default_rng(9), flip=False)
    assert out1.shape == images.shape
    assert np.array_equal(out1, out2)
    out3 = augment_batch(images, np.random.default_rng(10), flip=False)
    assert not np.array_equal(out1, out3)


def test_augment_flip_actually_mirrors():
    images = np.zeros((200, 1, 4, 4), dtype=np.float32)
    images[:, :, :, 0] = 1.0
    out = augment_batch(images, np.random.default_rng(0), pad=0, flip=True)
    flipped = (out[:, 0, 0, -1] == 1.0)
    assert 0.3 < flipped.mean() < 0.7
