import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import correlate2d

from cascadetrack import ndtensor as nd
from cascadetrack.ndtensor import Tensor, ShapeError


def leaf(rng, *shape, positive=False):
    a = rng.standard_normal(shape)
    if positive:
        a = np.abs(a) + 0.5
    return Tensor(a, requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


UNARY = {
    "neg": nd.neg,
    "exp": nd.exp,
    "sigmoid": nd.sigmoid,
    "tanh": nd.tanh,
    "softplus": nd.softplus,
    "square": lambda a: nd.power(a, 2.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(rng, name):
    a = leaf(rng, 3, 4)
    w = rng.standard_normal((3, 4))
    assert nd.grad_check(lambda: (UNARY[name](a) * w).sum(), [a]) < 1e-6


@pytest.mark.parametrize("fn", [nd.log, nd.sqrt, lambda a: nd.power(a, 1.5)])
def test_positive_domain_gradients(rng, fn):
    a = leaf(rng, 5, positive=True)
    assert nd.grad_check(lambda: fn(a).sum(), [a]) < 1e-6


def test_kinked_primitives_away_from_kinks(rng):
    a = Tensor(np.array([-2.0, -0.6, 0.4, 1.7, 3.0]), requires_grad=True)
    for fn in (nd.relu, nd.tabs, nd.smooth_l1):
        assert nd.grad_check(lambda: (fn(a) * np.arange(1.0, 6.0)).sum(), [a]) < 1e-7


@pytest.mark.parametrize("op", [nd.add, nd.sub, nd.mul, nd.div])
def test_binary_gradients(rng, op):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 3, positive=True)
    assert nd.grad_check(lambda: (op(a, b) ** 2).sum(), [a, b]) < 1e-6


def test_bias_add_sums_gradient_over_leading_axes(rng):
    x, b = leaf(rng, 4, 3), leaf(rng, 3)
    nd.backward((x + b).sum())
    assert np.allclose(b.grad, np.full(3, 4.0))


def test_reductions_and_shapes(rng):
    a = leaf(rng, 2, 3, 4)
    assert nd.grad_check(lambda: (a.sum(axis=1) ** 2).sum(), [a]) < 1e-6
    assert nd.grad_check(lambda: (a.mean(axis=(0, 2), keepdims=True) ** 2).sum(), [a]) < 1e-6
    assert nd.grad_check(lambda: (a.reshape(6, 4).transpose(1, 0)[1:3] ** 2).sum(), [a]) < 1e-6
    assert nd.grad_check(lambda: (nd.expand(a[:, :1, :], (2, 3, 4)) * a).sum(), [a]) < 1e-6


def test_gather_accumulates_repeated_indices(rng):
    a = leaf(rng, 5)
    nd.backward(a[np.array([0, 0, 3])].sum())
    assert a.grad.tolist() == [2.0, 0.0, 0.0, 1.0, 0.0]


def test_concat_stack_gradients(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
    assert nd.grad_check(lambda: (nd.concat([a, b], axis=1) ** 2).sum(), [a, b]) < 1e-6
    assert nd.grad_check(lambda: (nd.stack([a, b], axis=2) ** 3).sum(), [a, b]) < 1e-6


def test_matmul_and_affine(rng):
    x, W, b = leaf(rng, 4, 3), leaf(rng, 5, 3), leaf(rng, 5)
    v = leaf(rng, 3)
    assert nd.grad_check(lambda: (nd.affine(x, W, b) ** 2).sum(), [x, W, b]) < 1e-6
    assert nd.grad_check(lambda: (nd.affine(v, W, b) ** 2).sum(), [v, W, b]) < 1e-6
    assert nd.grad_check(lambda: ((x @ W.T) ** 2).sum(), [x, W]) < 1e-6


def test_affine_matches_numpy(rng):
    x, W, b = rng.standard_normal((4, 3)), rng.standard_normal((5, 3)), rng.standard_normal(5)
    assert np.allclose(nd.affine(x, W, b).data, x @ W.T + b, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_gradients(rng, stride, pad):
    x, k, b = leaf(rng, 2, 2, 7, 7), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
    assert nd.grad_check(lambda: (nd.conv2d(x, k, stride, pad, b) ** 2).sum(), [x, k, b]) < 1e-6


def test_conv2d_matches_scipy_correlation(rng):
    x, k = rng.standard_normal((9, 8)), rng.standard_normal((3, 2))
    ours = nd.conv2d(x, k).data
    assert np.allclose(ours, correlate2d(x, k, mode="valid"), atol=1e-12)


def test_conv2d_multichannel_stride_matches_loop(rng):
    x, k = rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((4, 2, 3, 3))
    out = nd.conv2d(x, k, stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 4, 3, 3))
    for o in range(4):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o]).sum()
    assert np.allclose(out, ref, atol=1e-12)


def test_conv2d_rejects_oversized_kernel():
    with pytest.raises(ShapeError):
        nd.conv2d(np.zeros((2, 2)), np.zeros((3, 3)))


def test_conv_output_size():
    assert nd.conv_output_size(100, 3, 2, 1) == 50
    assert nd.conv_output_size(50, 3, 2, 1) == 25
    assert nd.conv_output_size(25, 3, 2, 1) == 13


def test_upsample_nearest(rng):
    x = leaf(rng, 1, 2, 3, 3)
    up = nd.upsample_nearest(x, 2)
    assert up.shape == (1, 2, 6, 6)
    assert np.array_equal(up.data[0, 1, 4:6, 2:4], np.full((2, 2), x.data[0, 1, 2, 1]))
    assert nd.grad_check(lambda: (nd.upsample_nearest(x, 2) ** 2).sum(), [x]) < 1e-6


def test_shape_mismatch_is_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) * Tensor(np.zeros(3))


def test_backward_requires_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        nd.backward(a * 2.0)


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with nd.no_grad():
        y = (a * 2.0).sum()
    assert not y.requires_grad
    with nd.no_grad(), nd.enable_grad():
        assert (a * 2.0).requires_grad


def test_checked_mode_rejects_non_finite():
    a = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    with nd.checked(), np.errstate(divide="ignore"):
        with pytest.raises(FloatingPointError):
            nd.log(a)
    nd.log(Tensor(np.array([1.0])))


def test_gradients_accumulate_across_backward_calls():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    nd.backward((a * a).sum())
    nd.backward((a * a).sum())
    assert a.grad.tolist() == [4.0, 8.0]


def test_sigmoid_is_stable_for_large_inputs():
    s = nd.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    assert s.tolist() == [0.0, 0.5, 1.0]


def test_param_block_round_trip(tmp_path, rng):
    named = {"w": rng.standard_normal((2, 3)), "b": rng.standard_normal(3), "s": np.array(2.5)}
    nd.save_params(tmp_path / "p.bin", {k: Tensor(v) for k, v in named.items()})
    back = nd.load_params(tmp_path / "p.bin")
    assert list(back) == ["w", "b", "s"]
    for k in named:
        assert np.array_equal(back[k], named[k])


def test_param_block_bad_magic():
    with pytest.raises(ValueError):
        nd.parse_params(b"XXXX\x01\x00\x00\x00\x00")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_product_rule_property(xs, ys):
    n = min(len(xs), len(ys))
    a = Tensor(np.array(xs[:n]), requires_grad=True)
    b = Tensor(np.array(ys[:n]), requires_grad=True)
    nd.backward((a * b).sum())
    assert np.allclose(a.grad, b.data) and np.allclose(b.grad, a.data)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_sum_gradient_is_ones(r, c, seed):
    a = Tensor(np.random.default_rng(seed).standard_normal((r, c)), requires_grad=True)
    nd.backward(a.sum())
    assert np.array_equal(a.grad, np.ones((r, c)))
