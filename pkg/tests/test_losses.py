import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from seqft import numerics as nx
from seqft.losses import DICE_EPS, DataError, feature_mse, kd_loss, refine_loss, seg_loss
from seqft.nn import FeatureMap
from seqft.numerics import ShapeError, Tensor

from .gradcheck import check_gradients


def test_perfect_prediction_near_zero():
    target = np.array([0, 1, 2, 1, 0, 2])
    logits = np.full((6, 3), -30.0)
    logits[np.arange(6), target] = 30.0
    res = seg_loss(Tensor(logits, dtype=np.float64), target)
    assert res.components["dice"] < 1e-6
    assert res.components["ce"] < 1e-6


def test_disjoint_prediction_dice_loss_one():
    target = np.array([1, 1, 0, 0])
    logits = np.full((4, 2), -30.0)
    logits[np.arange(4), 1 - target] = 30.0
    res = seg_loss(Tensor(logits, dtype=np.float64), target)
    assert res.components["dice"] == pytest.approx(1.0, abs=1e-5)


def test_uniform_binary_direct_formula():
    # 4 cells, half foreground, uniform logits: every prob is 0.5
    res = seg_loss(Tensor(np.zeros((4, 2)), dtype=np.float64), np.array([0, 0, 1, 1]))
    ce = math.log(2.0)
    inter = 0.5 * 2
    denom = 0.5 * 4 + 2
    dice = 1.0 - (2 * inter + DICE_EPS) / (denom + DICE_EPS)
    assert res.components["ce"] == pytest.approx(ce, abs=1e-12)
    assert res.components["dice"] == pytest.approx(dice, abs=1e-12)
    assert res.item() == pytest.approx(1.1931459305630703, abs=1e-12)


def test_total_is_dice_plus_ce():
    rng = np.random.default_rng(3)
    res = seg_loss(Tensor(rng.normal(size=(20, 3))), rng.integers(0, 3, 20))
    assert res.item() == pytest.approx(res.components["dice"] + res.components["ce"], abs=1e-6)


def test_bad_label_names_cell():
    with pytest.raises(DataError, match="cell 2"):
        seg_loss(Tensor(np.zeros((4, 2))), np.array([0, 1, 5, 0]))
    with pytest.raises(DataError, match="cell 0"):
        seg_loss(Tensor(np.zeros((4, 2))), np.array([-1, 1, 1, 0]))


def test_seg_loss_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        classes = 2 + seed % 3
        target = rng.integers(0, classes, 12)
        err = check_gradients(lambda p: seg_loss(p["z"], target).total, {"z": rng.normal(size=(12, classes))})
        assert err < 1e-3, seed


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (10, 3), elements=st.floats(-8, 8)), st.integers(0, 2**16))
def test_soft_dice_in_unit_interval(logits, seed):
    target = np.random.default_rng(seed).integers(0, 3, 10)
    res = seg_loss(Tensor(logits), target)
    assert -1e-9 <= res.components["dice"] <= 1 + 1e-9
    assert res.components["ce"] >= 0


# --- feature losses ------------------------------------------------------------------------
def test_kd_identity_is_zero():
    f = Tensor(np.random.default_rng(0).normal(size=(8, 4)))
    assert kd_loss(f, f).item() == 0.0
    assert refine_loss(f, f).item() == 0.0


def test_kd_constant_offset_is_one():
    f = np.random.default_rng(0).normal(size=(8, 4))
    assert kd_loss(Tensor(f + 1.0, dtype=np.float64), Tensor(f)).item() == pytest.approx(1.0, abs=1e-12)


def test_kd_matches_two_loop_sum():
    rng = np.random.default_rng(5)
    s, t = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    total = 0.0
    for i in range(8):
        for j in range(4):
            total += (s[i, j] - t[i, j]) ** 2
    assert kd_loss(Tensor(s), Tensor(t)).item() == pytest.approx(total / 32, rel=1e-12)


def test_refine_matches_kd():
    rng = np.random.default_rng(6)
    s, t = Tensor(rng.normal(size=(8, 4))), Tensor(rng.normal(size=(8, 4)))
    assert refine_loss(s, t).item() == kd_loss(s, t).item()


def test_feature_maps_accepted_and_shapes_checked():
    a = FeatureMap(Tensor(np.ones((2, 3))), "x")
    assert feature_mse(a, a).item() == 0.0
    with pytest.raises(ShapeError):
        kd_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_teacher_gets_no_gradient():
    s = Tensor(np.ones((2, 2)), requires_grad=True)
    t = Tensor(np.zeros((2, 2)), requires_grad=True)
    nx.backward(kd_loss(s, t))
    assert t.grad is None
    np.testing.assert_allclose(s.grad, 0.5)


def test_feature_loss_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        t = Tensor(rng.normal(size=(5, 3)))
        for fn in (kd_loss, refine_loss):
            assert check_gradients(lambda p: fn(p["s"], t), {"s": rng.normal(size=(5, 3))}) < 1e-3


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (4, 3), elements=st.floats(-5, 5)), hnp.arrays(np.float64, (4, 3), elements=st.floats(-5, 5)))
def test_kd_symmetric_and_nonnegative(a, b):
    ab = kd_loss(Tensor(a), Tensor(b)).item()
    assert ab == pytest.approx(kd_loss(Tensor(b), Tensor(a)).item(), rel=1e-12, abs=1e-15)
    assert ab >= 0.0
    assert (ab == 0.0) == np.array_equal(a, b)
