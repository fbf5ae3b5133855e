"""Learned group convolution: staged pruning, schedule, group lasso."""

import math

import numpy as np
import pytest

from condense.errors import ConfigError, ShapeError
from condense.lgc import (CondensationSchedule, LearnedGroupConv, cosine_lr,
                          condensation_tick, group_lasso_penalty, keep_counts)
from condense.tensor import Tensor

from reference import numeric_grad, rel_err


def make_layer(r=8, o=8, groups=2, factor=2, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return LearnedGroupConv(r, o, groups, factor, rng, dtype=dtype)


# -- keep counts and schedule ----------------------------------------------


def test_keep_counts_quarters():
    assert keep_counts(12, 4) == [12, 9, 6, 3]
    assert keep_counts(8, 2) == [8, 4]
    assert keep_counts(5, 1) == [5]
    # final stage always keeps floor(r / c)
    for r in (4, 7, 16, 33):
        for c in (2, 3, 4):
            assert keep_counts(r, c)[-1] == r // c


def test_schedule_boundaries():
    sched = CondensationSchedule(total_epochs=300, condense_factor=4)
    assert sched.boundaries == (50, 100, 150)
    assert CondensationSchedule(24, 4).boundaries == (4, 8, 12)
    assert CondensationSchedule(10, 1).boundaries == ()


def test_schedule_too_short_rejected():
    with pytest.raises(ConfigError):
        CondensationSchedule(total_epochs=2, condense_factor=4)


def test_condensation_tick_fires_once_per_boundary():
    sched = CondensationSchedule(24, 4)
    fired = {e: condensation_tick(sched, e) for e in range(1, 25)}
    assert fired[4] == 1 and fired[8] == 2 and fired[12] == 3
    assert all(v is None for e, v in fired.items() if e not in (4, 8, 12))


def test_cosine_endpoints():
    assert cosine_lr(0, 400, 0.1) == 0.1
    assert abs(cosine_lr(200, 400, 0.1) - 0.05) < 1e-12
    assert abs(cosine_lr(400, 400, 0.1)) < 1e-12
    with pytest.raises(ConfigError):
        cosine_lr(5, 4, 0.1)


# -- construction and queries ----------------------------------------------


def test_layer_rejects_bad_grouping():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        LearnedGroupConv(8, 6, 4, 2, rng)  # 4 does not divide 6
    with pytest.raises(ConfigError):
        LearnedGroupConv(3, 8, 2, 4, rng)  # floor(3/4) = 0 inputs left


def test_importance_is_masked_column_l1():
    layer = make_layer(r=3, o=2, groups=1, factor=1)
    layer.filter.data[:] = [[1.0, -2.0, 0.0], [3.0, 0.0, 1.0]]
    assert np.allclose(layer.importance(0), [4.0, 2.0, 1.0])
    layer.mask[:, 0] = 0  # pruned columns must score exactly 0
    assert np.allclose(layer.importance(0), [0.0, 2.0, 1.0])


def test_condense_keeps_strongest_columns_per_group():
    layer = make_layer(r=4, o=4, groups=2, factor=2)
    layer.filter.data[:] = [[1, 5, 2, 6],    # group 0 columns 1, 3 strongest
                            [1, 5, 2, 6],
                            [9, 1, 8, 1],    # group 1 columns 0, 2 strongest
                            [9, 1, 8, 1]]
    layer.condense_to_stage(1)
    assert list(layer.survivors(0)) == [1, 3]
    assert list(layer.survivors(1)) == [0, 2]
    # masked entries were zeroed in the filter as well
    assert layer.filter.data[0, 0] == 0 and layer.filter.data[2, 1] == 0


def test_condense_tie_keeps_lower_index():
    layer = make_layer(r=4, o=2, groups=1, factor=2)
    layer.filter.data[:] = np.ones((2, 4))
    layer.condense_to_stage(1)
    assert list(layer.survivors(0)) == [0, 1]


def test_condense_stage_order_enforced():
    layer = make_layer(r=8, o=4, groups=2, factor=4)
    with pytest.raises(ConfigError):
        layer.condense_to_stage(2)  # skipping stage 1
    layer.condense_to_stage(1)
    layer.condense_to_stage(2)
    layer.condense_to_stage(3)
    with pytest.raises(ConfigError):
        layer.condense_to_stage(4)  # no such stage for factor 4


def test_stage_sparsity_and_row_agreement():
    layer = make_layer(r=12, o=6, groups=3, factor=4, seed=5)
    counts = keep_counts(12, 4)
    for stage in range(1, 4):
        layer.condense_to_stage(stage)
        assert layer.applied_stage() == stage
        for g in range(3):
            rows = layer.mask[layer._group_rows(g)]
            assert (rows == rows[0]).all()
            assert int(rows[0].sum()) == counts[stage]
    assert layer.fully_condensed()
    assert layer.surviving_fraction() == counts[-1] / 12


def test_group_mask_row_detects_divergence():
    layer = make_layer()
    layer.mask[0, 0] = 0  # break one row only
    with pytest.raises(ShapeError):
        layer.group_mask_row(0)


def test_forward_applies_mask():
    layer = make_layer(r=4, o=4, groups=2, factor=2, dtype=np.float64)
    x = Tensor(np.random.default_rng(1).standard_normal((2, 4, 3, 3)))
    layer.condense_to_stage(1)
    out = layer.forward(x)
    w = layer.filter.data * layer.mask
    want = np.einsum("oc,nchw->nohw", w, x.data)
    assert np.allclose(out.data, want)


# -- group lasso -----------------------------------------------------------


def test_lasso_hand_value():
    layer = make_layer(r=2, o=2, groups=1, factor=1)
    layer.filter.data[:] = [[3.0, 0.0], [4.0, 0.0]]
    assert group_lasso_penalty(layer).item() == 5.0


def test_lasso_sums_per_group_columns():
    layer = make_layer(r=2, o=4, groups=2, factor=1)
    layer.filter.data[:] = [[1.0, 0.0], [0.0, 2.0],   # group 0: norms 1, 2
                            [0.0, 3.0], [4.0, 0.0]]   # group 1: norms 4, 3
    assert group_lasso_penalty(layer).item() == 10.0


def test_lasso_grad_and_zero_column_subgradient():
    layer = make_layer(r=6, o=4, groups=2, factor=2, seed=7)
    layer.condense_to_stage(1)  # leaves zero columns behind each group

    def value():
        return group_lasso_penalty(layer).item()

    group_lasso_penalty(layer).backward()
    analytic = layer.filter.grad.copy()
    num = numeric_grad(value, [layer.filter.data])[0]
    # masked coordinates must have exactly zero gradient
    assert np.array_equal(analytic * (1 - layer.mask), np.zeros_like(analytic))
    assert rel_err(analytic, num) < 1e-7


def test_lasso_shrinks_columns_under_sgd():
    layer = make_layer(r=4, o=4, groups=1, factor=1, seed=9)
    before = float(np.abs(layer.filter.data).sum())
    for _ in range(50):
        loss = group_lasso_penalty(layer)
        loss.backward()
        layer.filter.data -= 0.05 * layer.filter.grad
        layer.filter.zero_grad()
    assert float(np.abs(layer.filter.data).sum()) < before


def test_plain_dense_layer_never_prunes():
    layer = make_layer(r=4, o=4, groups=1, factor=1)
    assert layer.surviving_fraction() == 1.0
    assert layer.fully_condensed()  # factor 1: final count is all columns
    assert math.isclose(layer.importance(0).sum(),
                        np.abs(layer.filter.data).sum())
