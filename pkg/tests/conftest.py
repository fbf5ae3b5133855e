"""Shared fixtures: one tiny offline digit dataset and one short
training run, reused by every test that needs a real model."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from condense import (ModelConfig, TrainSettings, convert_model, load_dataset,
                      save_model, synthesize_digits, train)


@pytest.fixture(scope="session")
def digits_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("digits")
    synthesize_digits(d, train_count=600, test_count=200, seed=3)
    return d


@pytest.fixture(scope="session")
def micro_sets(digits_dir):
    return load_dataset("mnist", path=digits_dir)


@pytest.fixture(scope="session")
def micro_cfg():
    # two blocks of two layers, eight stem channels, halving condensation
    return ModelConfig(block_layers=(2, 2), k0=4, groups=2, condense_factor=2,
                       in_channels=1, input_resolution=28)


@pytest.fixture(scope="session")
def micro_settings():
    return TrainSettings(epochs=4, batch_size=64, lr0=0.1, seed=0,
                         dtype="float32")


@pytest.fixture(scope="session")
def micro_run(micro_cfg, micro_settings, micro_sets, tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_run")
    train_set, test_set = micro_sets
    return train(micro_cfg, micro_settings, train_set, test_set, out_dir=out)


@pytest.fixture(scope="session")
def micro_ckpts(micro_run, tmp_path_factory):
    """(train-form path, converted path) for the micro run."""
    out = tmp_path_factory.mktemp("micro_ckpts")
    micro_run.model.eval()
    converted = convert_model(micro_run.model)
    test_path = save_model(out / "micro.test.ckpt", converted, form="test")
    return micro_run.checkpoint_path, test_path


def settings_with(settings: TrainSettings, **kw) -> TrainSettings:
    return dataclasses.replace(settings, **kw)


def state_identical(a: dict, b: dict) -> bool:
    if sorted(a) != sorted(b):
        return False
    return all(a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k])
               for k in a)
