import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascadetrack import ndtensor as nd
from cascadetrack.boxgeom import BoxDelta
from cascadetrack.losses import (LossWeights, MarginConfig, MaskLossConfig, attention_loss, box_loss,
                                 combined_loss, margin_cls_loss, mask_loss, phi, phi_from_cos, smooth_l1)
from cascadetrack.ndtensor import Tensor


def param(rng, *shape, scale=0.5):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


# -- closed-form values ---------------------------------------------------------------

def test_smooth_l1_branches_meet_at_one():
    assert smooth_l1(1.0) == 0.5
    assert smooth_l1(-1.0) == 0.5
    assert smooth_l1(1.0 - 1e-12) == pytest.approx(0.5, abs=1e-11)
    assert smooth_l1(0.0) == 0.0
    assert smooth_l1(3.0) == 2.5


def test_smooth_l1_tensor_matches_float():
    u = np.linspace(-3, 3, 61)
    t = smooth_l1(Tensor(u)).data
    assert np.allclose(t, [smooth_l1(float(v)) for v in u], atol=0, rtol=0)


def test_combined_loss_default_weights_sum_to_one():
    assert combined_loss(1.0, 1.0, 1.0, LossWeights(0.2, 0.2, 0.6)) == pytest.approx(1.0, abs=1e-15)
    assert combined_loss(2.0, 0.0, 0.0) == pytest.approx(0.4)


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.5, 0.6)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_phi_continuous_at_branch_boundaries(m):
    for k in range(1, m):
        b = k * math.pi / m
        left = (-1) ** (k - 1) * math.cos(m * b) - 2 * (k - 1)
        right = (-1) ** k * math.cos(m * b) - 2 * k
        assert abs(left - right) < 1e-12
        assert abs(phi(b - 1e-13, m) - phi(b, m)) < 1e-10


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_phi_monotone_nonincreasing(m):
    grid = np.linspace(0, math.pi, 10_000)
    vals = np.array([phi(t, m) for t in grid])
    assert np.all(np.diff(vals) <= 1e-12)
    assert vals[0] == 1.0
    assert vals[-1] == pytest.approx(1.0 - 2 * m)


def test_phi_m1_is_cosine():
    for t in np.linspace(0, math.pi, 50):
        assert phi(t, 1) == pytest.approx(math.cos(t), abs=1e-15)


def test_phi_rejects_bad_input():
    with pytest.raises(ValueError):
        phi(-0.1, 2)
    with pytest.raises(ValueError):
        phi(1.0, 0)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_phi_from_cos_matches_phi(m):
    c = np.linspace(-0.999, 0.999, 301)
    ours = phi_from_cos(Tensor(c), m).data
    ref = [phi(math.acos(v), m) for v in c]
    assert np.allclose(ours, ref, atol=1e-10)


def test_attention_loss_values():
    assert attention_loss(BoxDelta(0, 0, 0, 0), BoxDelta(0, 0, 0, 0)).item() == 0.0
    assert attention_loss([1, 2, 0, 0], [0, 0, 0, 0]).item() == 5.0
    U, V = np.ones((3, 3)), np.zeros((3, 3))
    assert attention_loss([0, 0, 0, 0], [0, 0, 0, 0], U, V, 9).item() == pytest.approx(1.0)
    assert attention_loss([1, 0, 0, 0], [0, 0, 0, 0], U, V, 0).item() == 1.0


def test_margin_loss_value():
    f = np.array([[0.0, 2.0], [1.0, 0.5]])
    g = {"input": (np.array([[3.0, 4.0], [0.0, 1.0]]), np.zeros((2, 2)))}
    cfg = MarginConfig(margin_gamma=1.0, eps=1e-6, layers=("input",))
    # row 0: true class 1, gap = 0 - 2 = -2, |d| = 5 -> relu(-0.4 + 1) = 0.6
    # row 1: true class 0, gap = 0.5 - 1 = -0.5, |d| = 1 -> relu(-0.5 + 1) = 0.5
    val = margin_cls_loss(f, g, [1, 0], cfg).item()
    assert val == pytest.approx((1 - 2 / (5 + 1e-6)) + (1 - 0.5 / (1 + 1e-6)), abs=1e-15)
    assert val == pytest.approx(1.1, abs=1e-5)


def test_margin_loss_missing_layer():
    with pytest.raises(KeyError):
        margin_cls_loss(np.zeros((1, 2)), {"input": (np.zeros(3), np.zeros(3))}, [0])


def brute_mask_loss(x, W, y, m, lam):
    total, n = 0.0, 0
    for xi, yi in zip(x, y):
        nx = np.linalg.norm(xi)
        if nx == 0:
            continue
        logits = []
        for j, w in enumerate(W):
            nw = np.linalg.norm(w)
            cos = float(np.clip(w @ xi / (nw * nx), -1, 1))
            logits.append(nw * nx * (phi(math.acos(cos), m) if j == yi else cos))
        mx = max(logits)
        total += mx + math.log(sum(math.exp(v - mx) for v in logits)) - logits[yi]
        n += 1
    return total / n + lam * float((W * W).sum())


@pytest.mark.parametrize("m", [1, 2, 3])
def test_mask_loss_matches_brute_force(m):
    rng = np.random.default_rng(m)
    x, W = rng.normal(size=(12, 4)), rng.normal(size=(2, 4))
    y = rng.integers(0, 2, 12)
    x[3] = 0.0
    val, skipped = mask_loss(x, W, y, MaskLossConfig(m, 1e-3), return_skipped=True)
    assert skipped == 1
    assert val.item() == pytest.approx(brute_mask_loss(x, W, y, m, 1e-3), abs=1e-12)


def test_mask_loss_m1_is_softmax_cross_entropy():
    rng = np.random.default_rng(5)
    x, W = rng.normal(size=(6, 3)), rng.normal(size=(2, 3))
    y = rng.integers(0, 2, 6)
    z = x @ W.T
    ce = np.mean(np.log(np.exp(z).sum(1)) - z[np.arange(6), y])
    assert mask_loss(x, W, y, MaskLossConfig(1, 0.0)).item() == pytest.approx(ce, abs=1e-12)


def test_box_loss_shape_mismatch():
    with pytest.raises(ValueError):
        box_loss(np.zeros((2, 2)), np.zeros((3, 2)))


# -- gradients through a tiny model ---------------------------------------------------

TOL = 1e-4


def tiny(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 3))
    W1, b1 = param(rng, 4, 3), param(rng, 4)
    return rng, x, W1, b1


def test_grad_attention_loss():
    rng, x, W1, b1 = tiny(0)
    Wd = param(rng, 4, 4)
    gt = rng.normal(size=4)
    U, V = param(rng, 6, 6), Tensor(rng.normal(size=(6, 6)))

    def f():
        h = nd.tanh(nd.affine(Tensor(x[0]), W1, b1))
        return attention_loss(nd.affine(h, Wd, Tensor(np.zeros(4))), gt, U, V, 36)

    assert nd.grad_check(f, [W1, b1, Wd, U]) < TOL


def test_grad_margin_loss():
    rng, x, W1, b1 = tiny(1)
    Wc = param(rng, 2, 4)
    g = {"input": (rng.normal(size=(5, 3)), rng.normal(size=(5, 3))),
         "hidden": (rng.normal(size=(5, 4)), rng.normal(size=(5, 4)))}
    y = np.array([0, 1, 1, 0, 1])

    def f():
        h = nd.tanh(nd.affine(Tensor(x), W1, b1))
        return margin_cls_loss(h @ Wc.T, g, y, MarginConfig(margin_gamma=5.0))

    assert f().item() > 0
    assert nd.grad_check(f, [W1, b1, Wc]) < TOL


@pytest.mark.parametrize("m", [1, 2, 4])
def test_grad_mask_loss(m):
    rng, x, W1, b1 = tiny(2 + m)
    Wm = param(rng, 2, 4)
    y = np.array([0, 1, 1, 0, 1])

    def f():
        h = nd.tanh(nd.affine(Tensor(x), W1, b1))
        return mask_loss(h, Wm, y, MaskLossConfig(m, 1e-2))

    assert nd.grad_check(f, [W1, b1, Wm]) < TOL


def test_grad_box_loss():
    rng, x, W1, b1 = tiny(7)
    Wb = param(rng, 2, 4, scale=2.0)
    target = rng.normal(size=(5, 2)) * 2

    def f():
        return box_loss(nd.affine(nd.tanh(nd.affine(Tensor(x), W1, b1)), Wb, Tensor(np.zeros(2))), target)

    assert nd.grad_check(f, [W1, b1, Wb]) < TOL


def test_grad_combined_loss():
    rng, x, W1, b1 = tiny(8)
    Wc, Wm, Wb = param(rng, 2, 4), param(rng, 2, 4), param(rng, 2, 4)
    y = np.array([1, 0, 1, 1, 0])
    g = {"input": (rng.normal(size=(5, 2)), np.zeros((5, 2))), "hidden": (rng.normal(size=(5, 2)), np.zeros((5, 2)))}
    target = rng.normal(size=(5, 2))

    def f():
        h = nd.tanh(nd.affine(Tensor(x), W1, b1))
        lc = margin_cls_loss(h @ Wc.T, g, y, MarginConfig(margin_gamma=3.0))
        lm = mask_loss(h, Wm, y, MaskLossConfig(2, 1e-3))
        lb = box_loss(h @ Wb.T, target)
        return combined_loss(lc, lm, lb)

    assert nd.grad_check(f, [W1, b1, Wc, Wm, Wb]) < TOL


def test_zero_cls_weight_gives_zero_cls_gradient():
    rng, x, W1, b1 = tiny(9)
    Wc = param(rng, 2, 4)
    g = {"input": (np.ones((5, 3)), np.zeros((5, 3))), "hidden": (np.ones((5, 4)), np.zeros((5, 4)))}
    h = nd.tanh(nd.affine(Tensor(x), W1, b1))
    loss = combined_loss(margin_cls_loss(h @ Wc.T, g, np.zeros(5, int), MarginConfig(margin_gamma=5.0)),
                         Tensor(0.0), Tensor(0.0), LossWeights(0.0, 0.0, 1.0))
    nd.backward(loss)
    assert Wc.grad is None or not np.any(Wc.grad)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50))
def test_smooth_l1_is_continuous_and_even(u):
    assert smooth_l1(u) == smooth_l1(-u)
    assert smooth_l1(u) >= 0
    assert abs(smooth_l1(u + 1e-9) - smooth_l1(u)) < 1e-8
