"""Network assembly: densely connected blocks of learned group convolutions.

Every dense layer consumes the concatenation of all earlier feature
producers (the stem and every previous layer), average-pooled down to
its own resolution. Growth can stay constant per block or double each
block; the classifier reads the pooled concatenation of everything.

Two execution strategies produce identical numbers:

- "blockwise" keeps one running concatenation and pools the whole thing
  at each block transition, the classic dense-block layout;
- "fully_dense" keeps per-producer outputs and pools each one on demand
  through a cascade of 2x2 averages, caching each (producer, level)
  once. Composing exact 2x2 averages equals a single 2^d x 2^d average,
  so the difference is purely operational.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .lgc import LearnedGroupConv
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import (Tensor, avg_pool2d, concat, dropout, gather_channels,
                     global_avg_pool)

GROWTH_MODES = ("constant", "exponential")
CONNECTIVITY_MODES = ("blockwise", "fully_dense")


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    block_layers: tuple[int, ...] = (4, 4, 4)
    k0: int = 8
    growth_mode: str = "exponential"
    connectivity: str = "fully_dense"
    groups: int = 4
    condense_factor: int = 4
    stem_stride: int = 1
    stem_channels: int | None = None
    num_classes: int = 10
    in_channels: int = 3
    input_resolution: int = 32
    bottleneck: int = 4
    dropout_rate: float = 0.0
    fc_condense_factor: int = 1

    def __post_init__(self):
        object.__setattr__(self, "block_layers", tuple(int(n) for n in self.block_layers))

    # -- derived quantities -------------------------------------------------

    @property
    def num_blocks(self) -> int:
        return len(self.block_layers)

    def growth(self, block: int) -> int:
        if self.growth_mode == "constant":
            return self.k0
        return self.k0 * (2 ** block)

    @property
    def stem_out(self) -> int:
        return self.stem_channels if self.stem_channels is not None else 2 * self.k0

    @property
    def total_channels(self) -> int:
        return self.stem_out + sum(
            n * self.growth(m) for m, n in enumerate(self.block_layers)
        )

    def stem_resolution(self, input_resolution: int | None = None) -> int:
        res = self.input_resolution if input_resolution is None else input_resolution
        # 3x3 stem, padding 1: stride 1 preserves, stride 2 halves (ceil).
        return (res + 2 - 3) // self.stem_stride + 1

    def block_resolution(self, block: int, input_resolution: int | None = None) -> int:
        return self.stem_resolution(input_resolution) // (2 ** block)

    def validate(self, input_resolution: int | None = None):
        if not self.block_layers or any(n < 1 for n in self.block_layers):
            raise ConfigError(f"block_layers must be positive, got {self.block_layers}")
        if self.k0 < 1:
            raise ConfigError(f"k0 must be >= 1, got {self.k0}")
        if self.growth_mode not in GROWTH_MODES:
            raise ConfigError(
                f"growth_mode {self.growth_mode!r} not in {GROWTH_MODES}"
            )
        if self.connectivity not in CONNECTIVITY_MODES:
            raise ConfigError(
                f"connectivity {self.connectivity!r} not in {CONNECTIVITY_MODES}"
            )
        if self.groups < 1 or self.condense_factor < 1:
            raise ConfigError(
                f"groups={self.groups} and condense_factor={self.condense_factor} must be >= 1"
            )
        for m in range(self.num_blocks):
            k = self.growth(m)
            if k % self.groups:
                raise ConfigError(
                    f"block {m}: growth {k} not divisible by groups {self.groups}"
                )
        if self.stem_stride not in (1, 2):
            raise ConfigError(f"stem_stride must be 1 or 2, got {self.stem_stride}")
        if self.stem_out < 1 or self.stem_out % self.groups:
            raise ConfigError(
                f"stem channels {self.stem_out} must be positive and divisible by groups {self.groups}"
            )
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.bottleneck < 1:
            raise ConfigError(f"bottleneck must be >= 1, got {self.bottleneck}")
        if self.fc_condense_factor < 1:
            raise ConfigError(
                f"fc_condense_factor must be >= 1, got {self.fc_condense_factor}"
            )
        res0 = self.stem_resolution(input_resolution)
        halvings = self.num_blocks - 1
        if res0 % (2 ** halvings):
            raise ConfigError(
                f"stem output resolution {res0} does not survive {halvings} halvings"
            )

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_layers"] = list(self.block_layers)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["block_layers"] = tuple(d["block_layers"])
        return ModelConfig(**d)

    def with_overrides(self, **kwargs) -> "ModelConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs) if kwargs else self


PRESETS: dict[str, ModelConfig] = {
    # Desk-scale model: three blocks of four layers, growth 8/16/32.
    "cifar-lgc-small": ModelConfig(
        block_layers=(4, 4, 4), k0=8, growth_mode="exponential",
        connectivity="fully_dense", groups=4, condense_factor=4,
        stem_stride=1, num_classes=10, in_channels=3, input_resolution=32,
    ),
    # Large-input model: five blocks, growth doubling 8 -> 128, grouped
    # eightfold, classifier halved by fc condensation.
    "imagenet-table3": ModelConfig(
        block_layers=(4, 6, 8, 10, 8), k0=8, growth_mode="exponential",
        connectivity="fully_dense", groups=8, condense_factor=8,
        stem_stride=2, num_classes=1000, in_channels=3, input_resolution=224,
        fc_condense_factor=2,
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {sorted(PRESETS)}"
        ) from None


# -- connectivity graph ----------------------------------------------------


@dataclass(frozen=True)
class ProducerInfo:
    """One source of feature channels: index 0 is the stem, index i+1 is
    dense layer i."""

    index: int
    block: int
    channels: int


@dataclass(frozen=True)
class LayerNode:
    index: int
    block: int
    in_channels: int
    growth: int
    sources: tuple[int, ...]
    pool_factors: tuple[int, ...]


@dataclass(frozen=True)
class LayerGraph:
    producers: tuple[ProducerInfo, ...]
    nodes: tuple[LayerNode, ...]

    def input_ranges(self, node_index: int) -> list[tuple[int, int, int]]:
        """(producer, start, stop) channel ranges inside the node's input
        concatenation. node_index == len(nodes) means the classifier."""
        if node_index == len(self.nodes):
            sources = range(len(self.producers))
        else:
            sources = self.nodes[node_index].sources
        ranges = []
        off = 0
        for s in sources:
            ch = self.producers[s].channels
            ranges.append((s, off, off + ch))
            off += ch
        return ranges


def build_layer_graph(config: ModelConfig) -> LayerGraph:
    producers = [ProducerInfo(0, 0, config.stem_out)]
    nodes = []
    li = 0
    for m, count in enumerate(config.block_layers):
        k = config.growth(m)
        for _ in range(count):
            sources = tuple(range(len(producers)))
            factors = tuple(2 ** (m - producers[s].block) for s in sources)
            in_ch = sum(producers[s].channels for s in sources)
            nodes.append(LayerNode(li, m, in_ch, k, sources, factors))
            producers.append(ProducerInfo(li + 1, m, k))
            li += 1
    return LayerGraph(tuple(producers), tuple(nodes))


# -- layers ----------------------------------------------------------------


def permute_index(channels: int, groups: int) -> np.ndarray:
    """Channel shuffle: out[i] = in[(i mod G) * (C/G) + i div G].

    After a grouped op whose outputs are contiguous per group, this
    interleaves them so the next grouped op sees every group.
    """
    if groups < 1 or channels % groups:
        raise ConfigError(f"permute: groups {groups} must divide channels {channels}")
    per = channels // groups
    i = np.arange(channels)
    return (i % groups) * per + i // groups


def permute(x: Tensor, groups: int) -> Tensor:
    idx = permute_index(x.data.shape[1], groups)
    if groups == 1:
        return x
    return gather_channels(x, idx)


class DenseLayer(Module):
    """BN-ReLU -> learned group 1x1 (R -> bottleneck*k) -> shuffle ->
    BN-ReLU -> grouped 3x3 (-> k)."""

    def __init__(self, in_channels: int, growth: int, groups: int,
                 condense_factor: int, rng: np.random.Generator,
                 bottleneck: int = 4, dropout_rate: float = 0.0,
                 dtype=np.float32):
        super().__init__()
        mid = bottleneck * growth
        if growth % groups or mid % groups:
            raise ConfigError(
                f"growth {growth} and bottleneck width {mid} must be divisible by groups {groups}"
            )
        self.growth = growth
        self.groups = groups
        self.dropout_rate = dropout_rate
        self.bn1 = BatchNorm2d(in_channels, dtype=dtype)
        self.lgc = LearnedGroupConv(in_channels, mid, groups, condense_factor,
                                    rng, dtype=dtype)
        self.bn2 = BatchNorm2d(mid, dtype=dtype)
        self.conv = Conv2d(mid, growth, 3, rng, stride=1, padding=1,
                           groups=groups, dtype=dtype)
        self._shuffle = permute_index(mid, groups)

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = self.bn1(x, fuse_relu=True)
        h = self.lgc(h)
        if self.groups > 1:
            h = gather_channels(h, self._shuffle)
        h = self.bn2(h, fuse_relu=True)
        h = self.conv(h)
        if self.dropout_rate and self.training:
            if rng is None:
                raise ConfigError("dropout is active but no generator was passed")
            h = dropout(h, self.dropout_rate, rng, True)
        return h


def build_basic_layer(in_channels: int, growth: int, groups: int,
                      condense_factor: int, rng: np.random.Generator,
                      bottleneck: int = 4, dropout_rate: float = 0.0,
                      dtype=np.float32) -> DenseLayer:
    return DenseLayer(in_channels, growth, groups, condense_factor, rng,
                      bottleneck, dropout_rate, dtype)


# -- the network -----------------------------------------------------------


class LgcNet(Module):
    """Training-form network: stem, dense layers with prunable 1x1 convs,
    final BN, linear classifier over globally pooled features."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float32, init: str = "he"):
        super().__init__()
        config.validate()
        if init not in ("he", "zeros"):
            raise ConfigError(f"init must be 'he' or 'zeros', got {init!r}")
        self.config = config
        self.graph = build_layer_graph(config)
        self.dtype = np.dtype(dtype)
        builder = rng if init == "he" else _ZeroInit()
        self.stem = Conv2d(config.in_channels, config.stem_out, 3, builder,
                           stride=config.stem_stride, padding=1, dtype=dtype)
        self.layers = [
            DenseLayer(node.in_channels, node.growth, config.groups,
                       config.condense_factor, builder,
                       bottleneck=config.bottleneck,
                       dropout_rate=config.dropout_rate, dtype=dtype)
            for node in self.graph.nodes
        ]
        self.final_bn = BatchNorm2d(config.total_channels, dtype=dtype)
        self.classifier = Linear(config.total_channels, config.num_classes,
                                 builder, bias=True, dtype=dtype)

    # -- structure ----------------------------------------------------------

    def lgc_layers(self) -> list[LearnedGroupConv]:
        return [layer.lgc for layer in self.layers]

    def bn_parameters(self) -> list[Tensor]:
        out = []
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                out.extend([m.gamma, m.beta])
        return out

    def surviving_fraction(self) -> float:
        masks = [l.mask for l in self.lgc_layers()]
        total = sum(m.size for m in masks)
        return float(sum(m.sum() for m in masks) / total)

    def fully_condensed(self) -> bool:
        return all(l.fully_condensed() for l in self.lgc_layers())

    # -- execution ----------------------------------------------------------

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"model expects [N,{self.config.in_channels},H,W], got {x.data.shape}"
            )
        if self.config.connectivity == "blockwise":
            feats = self._forward_blockwise(x, rng)
        else:
            feats = self._forward_fully_dense(x, rng)
        h = self.final_bn(feats, fuse_relu=True)
        return self.classifier(global_avg_pool(h))

    def _forward_blockwise(self, x: Tensor, rng) -> Tensor:
        feats = self.stem(x)
        li = 0
        for m, count in enumerate(self.config.block_layers):
            if m > 0:
                feats = avg_pool2d(feats, 2)
            for _ in range(count):
                y = self.layers[li](feats, rng)
                feats = concat([feats, y], axis=1)
                li += 1
        return feats

    def _forward_fully_dense(self, x: Tensor, rng) -> Tensor:
        outs = [self.stem(x)]
        birth = [p.block for p in self.graph.producers]
        cache: dict[tuple[int, int], Tensor] = {}

        def at_level(pi: int, level: int) -> Tensor:
            if level == birth[pi]:
                return outs[pi]
            key = (pi, level)
            if key not in cache:
                cache[key] = avg_pool2d(at_level(pi, level - 1), 2)
            return cache[key]

        li = 0
        for m, count in enumerate(self.config.block_layers):
            for _ in range(count):
                xin = concat([at_level(p, m) for p in range(li + 1)], axis=1)
                outs.append(self.layers[li](xin, rng))
                li += 1
        last = self.config.num_blocks - 1
        return concat([at_level(p, last) for p in range(len(outs))], axis=1)


class _ZeroInit:
    """Stand-in generator producing zeros; used when only the structure
    matters (cost accounting), never for training."""

    def standard_normal(self, shape):
        return np.zeros(shape)


def build_model(config: ModelConfig, seed: int | np.random.Generator = 0,
                dtype=np.float32, init: str = "he") -> LgcNet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return LgcNet(config, rng, dtype=dtype, init=init)


# -- classifier condensation ----------------------------------------------


def fc_condense(layer: Linear, factor: int):
    """One-shot column pruning of a fully connected layer.

    Keeps the floor(in_features/factor) columns with the largest L1
    norm; ties keep the lower index. Masked columns are zeroed in the
    weight so they can never leak back in.
    """
    if factor < 1:
        raise ConfigError(f"fc condense factor must be >= 1, got {factor}")
    if factor == 1:
        return
    if not layer.prunable:
        raise ConfigError("cannot condense a non-prunable linear layer")
    r = layer.in_features
    keep = r // factor
    if keep < 1:
        raise ConfigError(f"floor({r}/{factor}) = 0: classifier would lose all inputs")
    live = np.flatnonzero(layer.mask.any(axis=0))
    scores = np.abs(layer.weight.data * layer.mask).sum(axis=0)[live]
    order = np.argsort(-scores, kind="stable")
    drop = live[order[keep:]]
    if drop.size:
        layer.mask[:, drop] = 0
        layer.weight.data[:, drop] = 0


def fc_survivors(layer: Linear) -> np.ndarray:
    """Ascending indices of input columns the classifier still reads."""
    if not layer.prunable:
        return np.arange(layer.in_features)
    return np.flatnonzero(layer.mask.any(axis=0))
