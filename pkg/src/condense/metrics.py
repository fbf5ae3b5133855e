"""Parameter and FLOP accounting for training-form and converted models.

One FLOP here is one multiply-add, and only layers that multiply weights
against activations pay anything:

- conv / grouped conv: out_ch * (in_ch / groups) * k^2 * out_H * out_W
- learned group conv in training form: the dense pointwise product
  out_ch * in_ch * H * W (masking does not shrink the computation);
  the converted form pays out_ch * keep * H * W, exactly a factor C less
- linear: out * live_in (a masked classifier is billed for live columns,
  matching what its converted realization actually computes)
- batch norm, relu, pooling, channel gathers, dropout: 0

Parameter counts cover stored learnable scalars only: masked entries do
not count, integer gather indices and running statistics do not count,
batch-norm scale and shift do.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .arch import LgcNet, fc_survivors
from .convert import ConvertedLgcNet
from .errors import ConfigError


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    flops: int


@dataclass
class CostReport:
    entries: list[LayerCost] = field(default_factory=list)

    def add(self, name: str, params: int, flops: int):
        self.entries.append(LayerCost(name, int(params), int(flops)))

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    def as_text(self) -> str:
        width = max([len(e.name) for e in self.entries] + [5])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'flops':>14}"]
        for e in self.entries:
            lines.append(f"{e.name:<{width}}  {e.params:>12}  {e.flops:>14}")
        lines.append(
            f"{'total':<{width}}  {self.total_params:>12}  {self.total_flops:>14}"
        )
        return "\n".join(lines)

    def as_keyvalues(self) -> str:
        lines = [f"total_params={self.total_params}",
                 f"total_flops={self.total_flops}"]
        for e in self.entries:
            lines.append(f"{e.name}.params={e.params}")
            lines.append(f"{e.name}.flops={e.flops}")
        return "\n".join(lines)


def conv_flops(out_ch: int, in_ch: int, kernel: int, out_h: int, out_w: int,
               groups: int = 1) -> int:
    if in_ch % groups or out_ch % groups:
        raise ConfigError(f"groups {groups} must divide {in_ch} and {out_ch}")
    return out_ch * (in_ch // groups) * kernel * kernel * out_h * out_w


def _pointwise(layer, mid: int) -> tuple[int, int, str]:
    """(params, flops_per_pixel, name) of a layer's 1x1 stage."""
    if hasattr(layer, "lgc"):
        lgc = layer.lgc
        return int(lgc.mask.sum()), mid * lgc.in_channels, "lgc"
    igc = layer.igc
    return igc.weight.data.size, mid * igc.per_group, "igc"


def _build_report(model, input_resolution: int | None, with_flops: bool) -> CostReport:
    cfg = model.config
    cfg.validate(input_resolution)
    res0 = cfg.stem_resolution(input_resolution)
    rep = CostReport()

    rep.add("stem", model.stem.weight.data.size,
            conv_flops(cfg.stem_out, cfg.in_channels, 3, res0, res0) if with_flops else 0)

    for node, layer in zip(model.graph.nodes, model.layers):
        r = res0 // (2 ** node.block)
        area = r * r
        mid = cfg.bottleneck * node.growth
        pw_params, pw_per_pixel, pw_name = _pointwise(layer, mid)
        name = f"layer{node.index}"
        rep.add(f"{name}.bn1", 2 * node.in_channels, 0)
        rep.add(f"{name}.{pw_name}", pw_params,
                pw_per_pixel * area if with_flops else 0)
        rep.add(f"{name}.bn2", 2 * mid, 0)
        rep.add(f"{name}.conv3x3", layer.conv.weight.data.size,
                conv_flops(node.growth, mid, 3, r, r, cfg.groups) if with_flops else 0)

    rep.add("final_bn", 2 * cfg.total_channels, 0)

    if isinstance(model, ConvertedLgcNet):
        fc_in = model.classifier.in_features
        fc_params = model.classifier.weight.data.size
    else:
        live = fc_survivors(model.classifier)
        fc_in = int(live.size)
        fc_params = int(model.classifier.mask.sum()) if model.classifier.prunable \
            else model.classifier.weight.data.size
    bias = model.classifier.bias
    fc_params += bias.data.size if bias is not None else 0
    rep.add("classifier", fc_params,
            cfg.num_classes * fc_in if with_flops else 0)
    return rep


def count_params(model: LgcNet | ConvertedLgcNet) -> CostReport:
    """Stored learnable scalars per layer; the flops column stays 0."""
    return _build_report(model, None, with_flops=False)


def count_flops(model: LgcNet | ConvertedLgcNet,
                input_resolution: int | None = None) -> CostReport:
    """Forward multiply-add cost per layer for one input image, plus the
    same parameter accounting."""
    return _build_report(model, input_resolution, with_flops=True)
