"""Minimal module system on top of the tensor engine.

Modules hold parameters (Tensors) and buffers (plain ndarrays such as
batch-norm running stats or pruning masks). Child discovery walks
instance attributes in insertion order, so state_dict key order is the
construction order and therefore deterministic.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, batch_norm, group_conv2d, linear, mul_const


class Module:
    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    # -- attribute walking -------------------------------------------------

    def register_buffer(self, name: str, array: np.ndarray):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def set_buffer(self, name: str, array: np.ndarray):
        """Replace a registered buffer, keeping the attribute in sync."""
        if name not in self._buffers:
            raise KeyError(f"no buffer named {name}")
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def children(self):
        for name, child in self.named_children():
            yield child

    def named_children(self):
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self):
        yield self
        for child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = ""):
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def named_buffers(self, prefix: str = ""):
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_buffers(prefix + name + ".")

    # -- mode and state ----------------------------------------------------

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ShapeError(
                f"state mismatch: missing keys {missing}, unexpected keys {extra}"
            )
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ShapeError(
                    f"state {name!r}: shape {src.shape} does not match {arr.shape}"
                )
            arr[...] = src.astype(arr.dtype, copy=False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              dtype) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    """Grouped 2-d convolution layer, bias-free by default."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = False, dtype=np.float32):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ShapeError(
                f"Conv2d: groups={groups} must divide in={in_channels} and out={out_channels}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (in_channels // groups) * kernel * kernel
        self.weight = Tensor(
            he_normal(rng, (out_channels, in_channels // groups, kernel, kernel),
                      fan_in, dtype),
            requires_grad=True,
        )
        self.bias = None
        if bias:
            self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        y = group_conv2d(x, self.weight, groups=self.groups, stride=self.stride,
                         padding=self.padding)
        if self.bias is not None:
            y = _add_channel_bias(y, self.bias)
        return y


def _add_channel_bias(y: Tensor, bias: Tensor) -> Tensor:
    from .tensor import _acc, _track

    out = Tensor(y.data + bias.data.reshape(1, -1, 1, 1))

    def backward():
        _acc(y, out.grad, shared=True)
        _acc(bias, out.grad.sum(axis=(0, 2, 3)))

    return _track(out, (y, bias), backward)


class BatchNorm2d(Module):
    """Batch normalization over the channel axis of [N,C,H,W] or [N,C]."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor, fuse_relu: bool = False) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, self.training, self.momentum, self.eps,
                          fuse_relu=fuse_relu)


class Linear(Module):
    """Fully connected layer, optionally with a prunable input mask.

    The mask starts as all ones; column pruning zeroes entire columns.
    The effective weight is weight * mask, so masked inputs contribute
    nothing and receive no gradient through this layer. Converted
    inference models build with prunable=False and carry no mask at all.
    """

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True,
                 prunable: bool = True, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(
            he_normal(rng, (out_features, in_features), in_features, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None
        self.prunable = prunable
        if prunable:
            self.register_buffer("mask", np.ones((out_features, in_features), dtype=dtype))

    def effective_weight(self) -> Tensor:
        if not self.prunable or self.mask.all():
            return self.weight
        return mul_const(self.weight, self.mask)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.effective_weight(), self.bias)
