"""Network assembly: config rules, layer graph, shuffles, forward shapes."""

import numpy as np
import pytest

from condense.arch import (LgcNet, ModelConfig, PRESETS, build_layer_graph,
                           build_model, fc_condense, fc_survivors,
                           permute_index, preset)
from condense.errors import ConfigError
from condense.nn import Linear
from condense.tensor import Tensor


def test_config_derived_channels():
    cfg = ModelConfig(block_layers=(2, 2), k0=4)
    assert cfg.stem_out == 8
    assert cfg.growth(0) == 4 and cfg.growth(1) == 8
    assert cfg.total_channels == 8 + 2 * 4 + 2 * 8


def test_config_constant_growth():
    cfg = ModelConfig(growth_mode="constant", k0=6, block_layers=(3, 3))
    assert cfg.growth(1) == 6
    assert cfg.total_channels == 12 + 6 * 6


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        ModelConfig(block_layers=()).validate()
    with pytest.raises(ConfigError):
        ModelConfig(k0=0).validate()
    with pytest.raises(ConfigError):
        ModelConfig(growth_mode="cubic").validate()
    with pytest.raises(ConfigError):
        ModelConfig(groups=3, k0=8).validate()  # 3 does not divide stem 16
    with pytest.raises(ConfigError):
        ModelConfig(num_classes=1).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dropout_rate=1.0).validate()


def test_config_round_trip_and_overrides():
    cfg = preset("cifar-lgc-small")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    small = cfg.with_overrides(in_channels=1, input_resolution=28)
    assert small.in_channels == 1 and small.groups == cfg.groups
    assert cfg.with_overrides() is cfg


def test_presets_exist_and_validate():
    for name in ("cifar-lgc-small", "imagenet-table3"):
        assert name in PRESETS
        PRESETS[name].validate()
    with pytest.raises(ConfigError):
        preset("nope")


def test_layer_graph_full_history():
    cfg = ModelConfig(block_layers=(2, 2), k0=4)
    graph = build_layer_graph(cfg)
    assert len(graph.producers) == 5  # stem plus four layers
    assert len(graph.nodes) == 4
    for i, node in enumerate(graph.nodes):
        # every earlier producer feeds every later layer
        assert node.sources == tuple(range(i + 1))
    assert graph.nodes[0].in_channels == 8
    assert graph.nodes[2].in_channels == 8 + 4 + 4
    ranges = graph.input_ranges(1)
    assert ranges[0] == (0, 0, 8) and ranges[1] == (1, 8, 12)
    # sources precede consumers everywhere
    for node in graph.nodes:
        assert max(node.sources) <= node.index


def test_cross_block_sources_get_pooled():
    cfg = ModelConfig(block_layers=(2, 2), k0=4)
    graph = build_layer_graph(cfg)
    lay2 = graph.nodes[2]  # first layer of block 1
    assert lay2.pool_factors[0] == 2  # stem is one resolution step up
    assert all(f == 1 for f in graph.nodes[1].pool_factors)


def test_permute_index_values():
    assert list(permute_index(8, 4)) == [0, 2, 4, 6, 1, 3, 5, 7]
    assert list(permute_index(8, 2)) == [0, 4, 1, 5, 2, 6, 3, 7]
    assert list(permute_index(6, 1)) == [0, 1, 2, 3, 4, 5]
    with pytest.raises(ConfigError):
        permute_index(7, 2)


def test_permute_index_mixes_groups():
    # consecutive output channels come from distinct input groups
    idx = permute_index(12, 3)
    source_group = idx // 4
    for i in range(0, 12, 3):
        assert sorted(source_group[i:i + 3]) == [0, 1, 2]


def test_build_model_forward_shape():
    cfg = ModelConfig(block_layers=(2, 2), k0=4, groups=2, condense_factor=2,
                      in_channels=1, input_resolution=28)
    model = build_model(cfg, seed=0, dtype=np.float64)
    x = Tensor(np.random.default_rng(0).standard_normal((3, 1, 28, 28)))
    out = model(x)
    assert out.data.shape == (3, 10)
    assert len(model.layers) == 4
    assert model.surviving_fraction() == 1.0


def test_model_rejects_wrong_input_channels():
    cfg = ModelConfig(block_layers=(2,), k0=4, groups=1, condense_factor=1)
    model = build_model(cfg, seed=0)
    from condense.errors import ShapeError
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 2, 32, 32), dtype=np.float32)))


def test_stem_stride_halves_resolution():
    cfg = ModelConfig(block_layers=(2,), k0=4, stem_stride=2)
    assert cfg.stem_resolution(32) == 16
    assert cfg.stem_resolution(224) == 112


def test_fc_condense_keeps_strongest_columns():
    rng = np.random.default_rng(0)
    layer = Linear(4, 2, rng, dtype=np.float64)
    layer.weight.data[:] = [[4.0, 3.0, 2.0, 1.0], [0.0, 0.0, 0.0, 0.0]]
    fc_condense(layer, 2)
    assert list(fc_survivors(layer)) == [0, 1]
    assert np.array_equal(layer.mask[:, 2:], np.zeros((2, 2)))
    assert np.array_equal(layer.weight.data[:, 2:], np.zeros((2, 2)))


def test_fc_condense_factor_one_noop():
    rng = np.random.default_rng(1)
    layer = Linear(4, 2, rng)
    before = layer.weight.data.copy()
    fc_condense(layer, 1)
    assert np.array_equal(layer.weight.data, before)
    assert list(fc_survivors(layer)) == [0, 1, 2, 3]


def test_fc_condense_rejects_bad_factor():
    rng = np.random.default_rng(2)
    with pytest.raises(ConfigError):
        fc_condense(Linear(4, 2, rng), 0)
    with pytest.raises(ConfigError):
        fc_condense(Linear(2, 2, rng), 4)  # would keep zero columns
    with pytest.raises(ConfigError):
        fc_condense(Linear(4, 2, rng, prunable=False), 2)


def test_condensed_model_masks_follow_schedule():
    cfg = ModelConfig(block_layers=(2, 2), k0=4, groups=2, condense_factor=2)
    model = build_model(cfg, seed=3)
    for lgc in model.lgc_layers():
        lgc.condense_to_stage(1)
    assert model.surviving_fraction() == 0.5
    for lgc in model.lgc_layers():
        assert lgc.fully_condensed()
