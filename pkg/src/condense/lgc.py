"""Learned group convolution: training-time pruning of a 1x1 conv into
group structure.

The layer owns a dense pointwise filter F of shape [O, R] and a binary
mask M of the same shape. Output channels are split into G contiguous
filter groups of O/G rows; all rows of a group always share one mask
row, so pruning removes whole input columns per group. A condensation
factor C drives C-1 pruning stages that shrink each group's incoming
columns from R down to floor(R/C), ranked by the column's L1 weight
norm within the group. The end state is exactly the connectivity of a
grouped convolution over a learned, possibly overlapping channel
selection, which convert.py later makes explicit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Module, he_normal
from .tensor import Tensor, _acc, _track, conv1x1, mul_const

__all__ = [
    "LearnedGroupConv",
    "CondensationSchedule",
    "condensation_tick",
    "cosine_lr",
    "keep_counts",
    "group_lasso_penalty",
    "apply_group_lasso",
]


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 to 0 over total_steps.

    step counts from 0; step == total_steps yields exactly 0.
    """
    if total_steps <= 0:
        raise ConfigError(f"cosine_lr: total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(
            f"cosine_lr: step {step} outside [0, {total_steps}]"
        )
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


def keep_counts(r: int, c: int) -> list[int]:
    """Surviving columns per group after each stage, stage 0 (no pruning)
    through stage C-1 (final).

    Stages are evenly spaced in removed-column count; the last stage is
    pinned to floor(R/C) so rounding never changes the final size.
    """
    if c < 1:
        raise ConfigError(f"condense factor must be >= 1, got {c}")
    if c == 1:
        return [r]
    final = r // c
    if final < 1:
        raise ConfigError(f"floor({r}/{c}) = 0: nothing would survive condensation")
    total_removed = r - final
    counts = [r - (s * total_removed) // (c - 1) for s in range(c)]
    counts[-1] = final
    return counts


@dataclass(frozen=True)
class CondensationSchedule:
    """When to prune: stage s fires at the end of epoch boundaries[s-1].

    The first half of training hosts all C-1 stages, each lasting
    total_epochs / (2 (C-1)) epochs; the second half trains the fixed
    structure to convergence.
    """

    total_epochs: int
    condense_factor: int
    boundaries: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        m, c = self.total_epochs, self.condense_factor
        if m < 1:
            raise ConfigError(f"schedule needs >= 1 epoch, got {m}")
        if c < 1:
            raise ConfigError(f"condense factor must be >= 1, got {c}")
        if c == 1:
            object.__setattr__(self, "boundaries", ())
            return
        bounds = tuple((s * m) // (2 * (c - 1)) for s in range(1, c))
        if bounds[0] < 1 or any(b >= a for a, b in zip(bounds[1:], bounds)):
            raise ConfigError(
                f"{m} epochs cannot host {c - 1} distinct condensing stages"
            )
        object.__setattr__(self, "boundaries", bounds)

    @property
    def condensing_epochs(self) -> int:
        """Epochs during which pruning (and the lasso window) is active."""
        return self.boundaries[-1] if self.boundaries else 0

    def stage_after_epoch(self, completed_epochs: int) -> int:
        """Stages that should have been applied once this many epochs ran."""
        return sum(1 for b in self.boundaries if b <= completed_epochs)


def condensation_tick(schedule: CondensationSchedule, completed_epochs: int) -> int | None:
    """Stage to apply at the end of this epoch, or None.

    completed_epochs counts finished epochs starting at 1.
    """
    if completed_epochs < 1:
        raise ConfigError(f"completed_epochs must be >= 1, got {completed_epochs}")
    for s, b in enumerate(schedule.boundaries, start=1):
        if b == completed_epochs:
            return s
    return None


class LearnedGroupConv(Module):
    """Pointwise convolution with G filter groups and a prunable mask.

    Rows [g*O/G, (g+1)*O/G) form group g. mask rows within a group stay
    identical at all times. With groups=1 and condense_factor=1 this is
    a plain dense 1x1 convolution that never prunes.
    """

    def __init__(self, in_channels: int, out_channels: int, groups: int,
                 condense_factor: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if groups < 1 or out_channels % groups:
            raise ConfigError(
                f"groups={groups} must divide out_channels={out_channels}"
            )
        if condense_factor < 1:
            raise ConfigError(f"condense factor must be >= 1, got {condense_factor}")
        if condense_factor > 1 and in_channels // condense_factor < 1:
            raise ConfigError(
                f"floor({in_channels}/{condense_factor}) = 0: layer would lose all inputs"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.groups = groups
        self.condense_factor = condense_factor
        self.filter = Tensor(
            he_normal(rng, (out_channels, in_channels), in_channels, dtype),
            requires_grad=True,
        )
        self.register_buffer(
            "mask", np.ones((out_channels, in_channels), dtype=dtype)
        )

    # -- structure queries -------------------------------------------------

    @property
    def rows_per_group(self) -> int:
        return self.out_channels // self.groups

    def _group_rows(self, g: int) -> slice:
        og = self.rows_per_group
        return slice(g * og, (g + 1) * og)

    def group_mask_row(self, g: int) -> np.ndarray:
        """Representative mask row of group g (all its rows agree)."""
        rows = self.mask[self._group_rows(g)]
        if not (rows == rows[0]).all():
            raise ShapeError(f"group {g}: mask rows diverged")
        return rows[0]

    def survivors(self, g: int) -> np.ndarray:
        """Ascending indices of unmasked columns for group g."""
        return np.flatnonzero(self.group_mask_row(g) != 0)

    def applied_stage(self) -> int:
        """Condensation stage implied by the current mask cardinality."""
        counts = keep_counts(self.in_channels, self.condense_factor)
        per_group = [int(self.survivors(g).size) for g in range(self.groups)]
        if len(set(per_group)) != 1:
            raise ShapeError(f"groups disagree on survivor count: {per_group}")
        try:
            return counts.index(per_group[0])
        except ValueError:
            raise ShapeError(
                f"{per_group[0]} survivors does not match any stage of {counts}"
            ) from None

    def surviving_fraction(self) -> float:
        return float(self.mask.sum() / self.mask.size)

    def fully_condensed(self) -> bool:
        final = keep_counts(self.in_channels, self.condense_factor)[-1]
        return all(self.survivors(g).size == final for g in range(self.groups))

    # -- pruning -----------------------------------------------------------

    def importance(self, g: int) -> np.ndarray:
        """Per-column L1 norm of group g's masked weights, length R.

        Columns already pruned score exactly 0.
        """
        rows = self._group_rows(g)
        return np.abs(self.filter.data[rows] * self.mask[rows]).sum(axis=0)

    def condense_to_stage(self, stage: int):
        """Prune each group down to keep_counts[stage] columns.

        Must be called with stage == applied_stage() + 1. Within a
        group, the lowest-importance unmasked columns are removed; ties
        break toward keeping the lower column index. Masked filter
        entries are zeroed so they stop contributing to anything.
        """
        counts = keep_counts(self.in_channels, self.condense_factor)
        current = self.applied_stage()
        if stage != current + 1:
            raise ConfigError(
                f"condense_to_stage({stage}) after stage {current}; stages are sequential"
            )
        if stage >= len(counts):
            raise ConfigError(
                f"stage {stage} out of range for condense factor {self.condense_factor}"
            )
        keep = counts[stage]
        for g in range(self.groups):
            rows = self._group_rows(g)
            cand = self.survivors(g)
            scores = self.importance(g)[cand]
            # Stable sort on negated scores: descending importance,
            # ascending column index among ties.
            order = np.argsort(-scores, kind="stable")
            drop = cand[order[keep:]]
            if drop.size:
                self.mask[rows][:, drop] = 0
                self.filter.data[rows][:, drop] = 0

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.in_channels:
            raise ShapeError(
                f"learned group conv expects {self.in_channels} channels, got {x.data.shape[1]}"
            )
        w = self.filter
        if not self.mask.all():
            w = mul_const(self.filter, self.mask)
        return conv1x1(x, w)


def group_lasso_penalty(layer: LearnedGroupConv) -> Tensor:
    """Sum over groups and unmasked columns of the column's L2 norm.

    Encourages whole group-columns toward zero so pruning removes weight
    the network already stopped using. The gradient of a zero-norm
    column is taken as 0 (the subgradient choice that leaves pruned
    columns untouched).
    """
    filt = layer.filter
    g, og, r = layer.groups, layer.rows_per_group, layer.in_channels
    fm = filt.data * layer.mask
    blocks = fm.reshape(g, og, r)
    norms = np.sqrt((blocks * blocks).sum(axis=1))  # [G, R]
    out = Tensor(np.asarray(norms.sum(), dtype=filt.data.dtype))

    def backward():
        inv = np.zeros_like(norms)
        nz = norms > 0
        inv[nz] = 1.0 / norms[nz]
        col_scale = np.repeat(inv, og, axis=0)
        _acc(filt, out.grad * fm * col_scale)

    return _track(out, (filt,), backward)


def apply_group_lasso(loss: Tensor, layers: list[LearnedGroupConv], lam: float) -> Tensor:
    """loss + lam * sum of per-layer group-lasso penalties."""
    if lam < 0:
        raise ConfigError(f"lasso weight must be >= 0, got {lam}")
    if lam == 0 or not layers:
        return loss
    total = loss
    for layer in layers:
        total = total + group_lasso_penalty(layer) * lam
    return total
