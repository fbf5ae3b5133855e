"""Conversion to inference form: index building, weight packing, and
output equivalence with the masked training network."""

import numpy as np
import pytest

from condense.convert import (ConvertedLgcNet, EquivalenceReport, build_index,
                              convert_model, default_tolerance,
                              extract_weights, verify_equivalence)
from condense.errors import ConversionError
from condense.lgc import LearnedGroupConv
from condense.tensor import Tensor, no_grad

from conftest import state_identical


def condensed_layer(r=6, o=4, groups=2, factor=3, seed=0):
    rng = np.random.default_rng(seed)
    layer = LearnedGroupConv(r, o, groups, factor, rng, dtype=np.float64)
    for stage in range(1, factor):
        layer.condense_to_stage(stage)
    return layer


def test_build_index_worked_example():
    layer = condensed_layer(r=6, o=4, groups=2, factor=3, seed=0)
    layer.mask[:] = 0
    layer.mask[0:2, [0, 4]] = 1  # group 0 keeps channels 0 and 4
    layer.mask[2:4, [1, 4]] = 1  # group 1 keeps channels 1 and 4
    index = build_index(layer)
    assert index.per_group == 2
    assert list(index.gather) == [0, 4, 1, 4]  # a channel may feed both groups
    assert index.gather.dtype == np.int64


def test_build_index_rejects_partial_condensation():
    rng = np.random.default_rng(2)
    layer = LearnedGroupConv(6, 4, 2, 3, rng)
    layer.condense_to_stage(1)  # one stage of two applied
    with pytest.raises(ConversionError):
        build_index(layer)


def test_extract_weights_packs_survivors():
    layer = condensed_layer(r=6, o=4, groups=2, factor=3, seed=3)
    index = build_index(layer)
    packed = extract_weights(layer, index)
    assert packed.shape == (4, 2, 1, 1)
    for g in range(2):
        cols = index.gather[g * 2:(g + 1) * 2]
        rows = slice(g * 2, (g + 1) * 2)
        assert np.array_equal(packed[rows, :, 0, 0],
                              layer.filter.data[rows][:, cols])


def test_indexed_conv_matches_masked_layer():
    layer = condensed_layer(r=8, o=4, groups=2, factor=2, seed=4)
    index = build_index(layer)
    from condense.convert import IndexedGroupConv
    conv = IndexedGroupConv(8, 4, 2, index.per_group, dtype=np.float64)
    conv.weight.data[:] = extract_weights(layer, index)
    conv.index[:] = index.gather
    x = Tensor(np.random.default_rng(5).standard_normal((3, 8, 5, 5)))
    with no_grad():
        want = layer.forward(x)
        got = conv.forward(x)
    assert np.allclose(got.data, want.data, atol=1e-12)


def test_convert_model_refusals(micro_run):
    model = micro_run.model
    model.train()
    with pytest.raises(ConversionError):
        convert_model(model)  # training mode
    model.eval()
    converted = convert_model(model)
    with pytest.raises(ConversionError):
        convert_model(converted)  # already converted
    with pytest.raises(ConversionError):
        convert_model("not a model")


def test_convert_refuses_uncondensed(micro_cfg):
    from condense import build_model
    model = build_model(micro_cfg, seed=0)
    model.eval()
    with pytest.raises(ConversionError):
        convert_model(model)


def test_converted_model_equivalence(micro_run):
    micro_run.model.eval()
    converted = convert_model(micro_run.model)
    report = verify_equivalence(micro_run.model, converted, n_inputs=60,
                                seed=7)
    assert isinstance(report, EquivalenceReport)
    assert report.n_inputs == 60
    assert report.argmax_agreement == 1.0
    assert report.max_abs_diff <= default_tolerance(np.float32)
    assert report.passed(default_tolerance(np.float32))
    assert not EquivalenceReport(5, 1e-3, 1.0).passed(1e-5)


def test_converted_state_round_trips(micro_run):
    micro_run.model.eval()
    a = convert_model(micro_run.model)
    b = ConvertedLgcNet(a.config, fc_keep=a.fc_keep, dtype=np.float32)
    b.load_state_dict(a.state_dict())
    b.eval()
    assert state_identical(a.state_dict(), b.state_dict())


def test_default_tolerance_by_dtype():
    assert default_tolerance(np.float32) == 1e-5
    assert default_tolerance(np.float64) == 1e-10
    assert default_tolerance("float64") == 1e-10
