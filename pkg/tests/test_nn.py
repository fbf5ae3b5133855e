"""Layer modules: parameter bookkeeping, forward behavior, state dicts."""

import numpy as np
import pytest

from condense.errors import ShapeError
from condense.nn import BatchNorm2d, Conv2d, Linear, Module, he_normal
from condense.tensor import Tensor, relu

from reference import conv2d_loops


def test_he_normal_scale():
    rng = np.random.default_rng(0)
    w = he_normal(rng, (2000, 50), 50, np.float64)
    assert w.dtype == np.float64
    assert abs(w.std() - np.sqrt(2 / 50)) < 0.01


def test_conv2d_module_matches_oracle():
    rng = np.random.default_rng(1)
    layer = Conv2d(4, 6, 3, rng, stride=2, padding=1, groups=2,
                   dtype=np.float64)
    x = rng.standard_normal((2, 4, 7, 7))
    want = conv2d_loops(x, layer.weight.data, stride=2, padding=1, groups=2)
    assert np.allclose(layer(Tensor(x)).data, want)


def test_conv2d_bias():
    rng = np.random.default_rng(2)
    layer = Conv2d(2, 3, 1, rng, bias=True, dtype=np.float64)
    layer.bias.data[:] = [1.0, 2.0, 3.0]
    x = np.zeros((1, 2, 2, 2))
    out = layer(Tensor(x)).data
    assert np.allclose(out[0, :, 0, 0], [1.0, 2.0, 3.0])


def test_conv2d_group_divisibility():
    rng = np.random.default_rng(3)
    with pytest.raises(ShapeError):
        Conv2d(3, 4, 3, rng, groups=2)


def test_linear_mask_blocks_input_columns():
    rng = np.random.default_rng(4)
    layer = Linear(4, 3, rng, dtype=np.float64)
    layer.mask[:, 2] = 0
    x = np.zeros((2, 4))
    x[:, 2] = 100.0  # only the masked column carries signal
    base = layer(Tensor(np.zeros((2, 4)))).data
    assert np.allclose(layer(Tensor(x)).data, base)


def test_linear_masked_column_gets_no_gradient():
    rng = np.random.default_rng(5)
    layer = Linear(4, 2, rng, dtype=np.float64)
    layer.mask[:, 1] = 0
    x = Tensor(rng.standard_normal((3, 4)))
    layer(x).sum().backward()
    assert np.array_equal(layer.weight.grad[:, 1], np.zeros(2))


def test_batchnorm_module_train_vs_eval():
    bn = BatchNorm2d(3, dtype=np.float64)
    x = np.random.default_rng(6).standard_normal((10, 3, 4, 4)) * 2 + 1
    bn.train()
    out = bn(Tensor(x))
    assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-10
    bn.eval()
    out_eval = bn(Tensor(x))
    # eval uses running stats, so one momentum update leaves a residue
    assert not np.allclose(out.data, out_eval.data)


def test_batchnorm_fuse_relu_flag():
    bn = BatchNorm2d(2, dtype=np.float64)
    x = Tensor(np.random.default_rng(7).standard_normal((6, 2, 3, 3)))
    bn.train()
    a = relu(bn(x)).data
    bn2 = BatchNorm2d(2, dtype=np.float64)
    bn2.train()
    b = bn2(x, fuse_relu=True).data
    assert np.array_equal(a, b)


def test_state_dict_round_trip():
    rng = np.random.default_rng(8)

    class Net(Module):
        def __init__(self):
            super().__init__()
            self.conv = Conv2d(2, 4, 3, rng)
            self.bn = BatchNorm2d(4)
            self.fc = Linear(4, 3, rng)

    a, b = Net(), Net()
    a.bn.running_mean[:] = 7.0
    a.fc.mask[:, 0] = 0
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        assert np.array_equal(v, b.state_dict()[k]), k


def test_state_dict_rejects_mismatches():
    rng = np.random.default_rng(9)
    layer = Linear(4, 3, rng)
    state = layer.state_dict()
    extra = dict(state)
    extra["bogus"] = np.zeros(1)
    with pytest.raises(ShapeError):
        layer.load_state_dict(extra)
    missing = dict(state)
    del missing["weight"]
    with pytest.raises(ShapeError):
        layer.load_state_dict(missing)
    wrong = {k: v for k, v in state.items()}
    wrong["weight"] = np.zeros((1, 1))
    with pytest.raises(ShapeError):
        layer.load_state_dict(wrong)


def test_train_eval_mode_recurses():
    rng = np.random.default_rng(10)

    class Net(Module):
        def __init__(self):
            super().__init__()
            self.bn = BatchNorm2d(2)
            self.fc = Linear(2, 2, rng)

    net = Net()
    assert net.training and net.bn.training
    net.eval()
    assert not net.training and not net.bn.training


def test_trainable_parameter_collection():
    rng = np.random.default_rng(11)
    layer = Linear(4, 3, rng, bias=True)
    params = layer.trainable_parameters()
    assert layer.weight in params and layer.bias in params
    assert len(layer.parameters()) == 2
