"""Lossless conversion of a condensed training-form network into a
standard grouped inference network.

A fully condensed learned group conv has floor(R/C) surviving input
columns per group. Conversion materializes that structure as an index
layer (a channel gather, duplicates allowed because groups may share
inputs) followed by an ordinary grouped 1x1 convolution whose weights
are copied, never recomputed, so the two forms agree bit for bit on the
surviving arithmetic. Masks disappear entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arch import (DenseLayer, LgcNet, ModelConfig, fc_survivors,
                   permute_index)
from .errors import ConversionError, ShapeError
from .lgc import LearnedGroupConv, keep_counts
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import (Tensor, avg_pool2d, concat, gather_channels,
                     global_avg_pool, group_conv2d, no_grad, tune_allocator)


@dataclass(frozen=True)
class IndexLayer:
    """Channel gather preceding a grouped conv: segment g of the gather
    vector lists group g's surviving input channels in ascending order."""

    gather: np.ndarray
    groups: int

    @property
    def per_group(self) -> int:
        return self.gather.size // self.groups


def build_index(layer: LearnedGroupConv) -> IndexLayer:
    """Read the final mask into a gather vector.

    Requires every group to hold exactly floor(R/C) survivors; partial
    condensation states cannot be expressed as a grouped conv.
    """
    final = keep_counts(layer.in_channels, layer.condense_factor)[-1]
    parts = []
    for g in range(layer.groups):
        surv = layer.survivors(g)
        if surv.size != final:
            raise ConversionError(
                f"group {g} has {surv.size} surviving columns, expected {final}; "
                "layer is not fully condensed"
            )
        parts.append(surv)
    return IndexLayer(np.concatenate(parts).astype(np.int64), layer.groups)


def extract_weights(layer: LearnedGroupConv, index: IndexLayer) -> np.ndarray:
    """Pack surviving filter entries into a [O, keep, 1, 1] grouped weight.

    Pure copy of unmasked scalars; copying a masked position would mean
    the index disagrees with the mask, which is a bug, not bad input.
    """
    og = layer.rows_per_group
    keep = index.per_group
    out = np.empty((layer.out_channels, keep, 1, 1), dtype=layer.filter.data.dtype)
    for g in range(layer.groups):
        rows = layer._group_rows(g)
        cols = index.gather[g * keep:(g + 1) * keep]
        if not layer.mask[rows][:, cols].all():
            raise AssertionError(
                f"group {g}: index selects a masked column; mask and index diverged"
            )
        out[rows, :, 0, 0] = layer.filter.data[rows][:, cols]
    return out


class IndexedGroupConv(Module):
    """Gather surviving channels, then run a standard grouped 1x1 conv."""

    def __init__(self, in_channels: int, out_channels: int, groups: int,
                 per_group: int, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.groups = groups
        self.per_group = per_group
        self.weight = Tensor(
            np.zeros((out_channels, per_group, 1, 1), dtype=dtype),
            requires_grad=False,
        )
        self.register_buffer(
            "index", np.zeros(groups * per_group, dtype=np.int64)
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.in_channels:
            raise ShapeError(
                f"indexed group conv expects {self.in_channels} channels, got {x.data.shape[1]}"
            )
        h = gather_channels(x, self.index)
        return group_conv2d(h, self.weight, groups=self.groups)


class ConvertedDenseLayer(Module):
    """Inference twin of DenseLayer: the learned group conv is replaced
    by its index + grouped conv realization."""

    def __init__(self, in_channels: int, growth: int, groups: int,
                 per_group: int, bottleneck: int, dtype=np.float32):
        super().__init__()
        mid = bottleneck * growth
        self.growth = growth
        self.groups = groups
        self.bn1 = BatchNorm2d(in_channels, dtype=dtype)
        self.igc = IndexedGroupConv(in_channels, mid, groups, per_group, dtype=dtype)
        self.bn2 = BatchNorm2d(mid, dtype=dtype)
        self.conv = Conv2d(mid, growth, 3, _zero_rng(), stride=1, padding=1,
                           groups=groups, dtype=dtype)
        self._shuffle = permute_index(mid, groups)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        h = self.bn1(x, fuse_relu=True)
        h = self.igc(h)
        if self.groups > 1:
            h = gather_channels(h, self._shuffle)
        h = self.bn2(h, fuse_relu=True)
        return self.conv(h)


class _zero_rng:
    def standard_normal(self, shape):
        return np.zeros(shape)


class ConvertedLgcNet(Module):
    """Inference-form network: same wiring as LgcNet, no masks anywhere.

    fc_keep is the number of input columns the classifier reads; when it
    is smaller than the full feature count an index buffer selects them.
    """

    def __init__(self, config: ModelConfig, fc_keep: int | None = None,
                 dtype=np.float32):
        super().__init__()
        config.validate()
        from .arch import build_layer_graph
        self.config = config
        self.graph = build_layer_graph(config)
        self.dtype = np.dtype(dtype)
        rng = _zero_rng()
        self.stem = Conv2d(config.in_channels, config.stem_out, 3, rng,
                           stride=config.stem_stride, padding=1, dtype=dtype)
        self.layers = []
        for node in self.graph.nodes:
            per_group = keep_counts(node.in_channels, config.condense_factor)[-1]
            self.layers.append(
                ConvertedDenseLayer(node.in_channels, node.growth, config.groups,
                                    per_group, config.bottleneck, dtype=dtype)
            )
        total = config.total_channels
        self.final_bn = BatchNorm2d(total, dtype=dtype)
        self.fc_keep = total if fc_keep is None else int(fc_keep)
        if self.fc_keep < total:
            self.register_buffer("fc_index", np.zeros(self.fc_keep, dtype=np.int64))
        self.classifier = Linear(self.fc_keep, config.num_classes, rng,
                                 bias=True, prunable=False, dtype=dtype)
        self.eval()

    def forward(self, x: Tensor, rng=None) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"model expects [N,{self.config.in_channels},H,W], got {x.data.shape}"
            )
        if self.config.connectivity == "blockwise":
            feats = self._forward_blockwise(x)
        else:
            feats = self._forward_fully_dense(x)
        h = self.final_bn(feats, fuse_relu=True)
        pooled = global_avg_pool(h)
        if self.fc_keep < self.config.total_channels:
            pooled = gather_channels(pooled, self.fc_index)
        return self.classifier(pooled)

    def _forward_blockwise(self, x: Tensor) -> Tensor:
        feats = self.stem(x)
        li = 0
        for m, count in enumerate(self.config.block_layers):
            if m > 0:
                feats = avg_pool2d(feats, 2)
            for _ in range(count):
                y = self.layers[li](feats)
                feats = concat([feats, y], axis=1)
                li += 1
        return feats

    def _forward_fully_dense(self, x: Tensor) -> Tensor:
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
                outs.append(self.layers[li](xin))
                li += 1
        last = self.config.num_blocks - 1
        return concat([at_level(p, last) for p in range(len(outs))], axis=1)


def _copy_bn(dst: BatchNorm2d, src: BatchNorm2d):
    dst.gamma.data[...] = src.gamma.data
    dst.beta.data[...] = src.beta.data
    dst.running_mean[...] = src.running_mean
    dst.running_var[...] = src.running_var
    dst.momentum = src.momentum
    dst.eps = src.eps


def convert_model(model: LgcNet) -> ConvertedLgcNet:
    """Copy a fully condensed training-form network into its grouped
    inference form. Refuses partial condensation, training mode, and
    double conversion."""
    if isinstance(model, ConvertedLgcNet):
        raise ConversionError("model is already in converted form")
    if not isinstance(model, LgcNet):
        raise ConversionError(f"cannot convert {type(model).__name__}")
    if model.training:
        raise ConversionError(
            "convert requires eval mode (batch-norm statistics must be frozen)"
        )
    not_done = [i for i, l in enumerate(model.lgc_layers()) if not l.fully_condensed()]
    if not_done:
        raise ConversionError(
            f"layers {not_done} are not fully condensed; finish the schedule first"
        )
    surv = fc_survivors(model.classifier)
    fc_keep = int(surv.size) if surv.size < model.classifier.in_features else None
    out = ConvertedLgcNet(model.config, fc_keep=fc_keep, dtype=model.dtype)

    out.stem.weight.data[...] = model.stem.weight.data
    for src_layer, dst_layer in zip(model.layers, out.layers):
        _copy_bn(dst_layer.bn1, src_layer.bn1)
        _copy_bn(dst_layer.bn2, src_layer.bn2)
        index = build_index(src_layer.lgc)
        dst_layer.igc.index[...] = index.gather
        dst_layer.igc.weight.data[...] = extract_weights(src_layer.lgc, index)
        dst_layer.conv.weight.data[...] = src_layer.conv.weight.data
    _copy_bn(out.final_bn, model.final_bn)
    if fc_keep is not None:
        out.fc_index[...] = surv
        out.classifier.weight.data[...] = model.classifier.weight.data[:, surv]
    else:
        out.classifier.weight.data[...] = model.classifier.weight.data
    out.classifier.bias.data[...] = model.classifier.bias.data
    return out


# -- equivalence -----------------------------------------------------------


@dataclass(frozen=True)
class EquivalenceReport:
    n_inputs: int
    max_abs_diff: float
    argmax_agreement: float

    def passed(self, tolerance: float) -> bool:
        return self.max_abs_diff <= tolerance


def default_tolerance(dtype) -> float:
    return 1e-10 if np.dtype(dtype) == np.float64 else 1e-5


def verify_equivalence(model_a: Module, model_b: Module, n_inputs: int = 100,
                       seed: int = 0, batch_size: int = 50,
                       input_resolution: int | None = None) -> EquivalenceReport:
    """Drive both models with the same random inputs and compare logits.

    Models run in eval mode under no_grad. Returns the largest absolute
    logit difference and the fraction of inputs whose argmax agrees.
    """
    cfg = model_a.config
    if model_b.config.in_channels != cfg.in_channels:
        raise ConversionError("models disagree on input channels")
    if np.dtype(model_a.dtype) != np.dtype(model_b.dtype):
        raise ConversionError(
            f"models disagree on dtype: {model_a.dtype} vs {model_b.dtype}"
        )
    res = cfg.input_resolution if input_resolution is None else input_resolution
    tune_allocator()
    rng = np.random.default_rng(seed)
    model_a.eval()
    model_b.eval()
    worst = 0.0
    agree = 0
    done = 0
    with no_grad():
        while done < n_inputs:
            b = min(batch_size, n_inputs - done)
            x = rng.standard_normal((b, cfg.in_channels, res, res)).astype(model_a.dtype)
            ya = model_a(Tensor(x)).data
            yb = model_b(Tensor(x)).data
            worst = max(worst, float(np.abs(ya - yb).max()))
            agree += int((ya.argmax(axis=1) == yb.argmax(axis=1)).sum())
            done += b
    return EquivalenceReport(n_inputs, worst, agree / n_inputs)
