import math

import numpy as np
import pytest

from cascadetrack import ndtensor as nd
from cascadetrack.ndtensor import Tensor
from cascadetrack.recurrent import LstmParams, LstmState, lstm_step, lstm_window, pad_window


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def scalar_lstm(w, x, h, c):
    """Hand-written single-cell recurrence; ``w`` maps gate -> (W_i, W_h, b_i, b_h)."""
    i = sig(w["i"][0] * x + w["i"][2] + w["i"][1] * h + w["i"][3])
    f = sig(w["f"][0] * x + w["f"][2] + w["f"][1] * h + w["f"][3])
    g = math.tanh(w["g"][0] * x + w["g"][2] + w["g"][1] * h + w["g"][3])
    o = sig(w["o"][0] * x + w["o"][2] + w["o"][1] * h + w["o"][3])
    c2 = f * c + i * g
    return o * math.tanh(c2), c2


def test_scalar_cell_oracle_100_instances():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        vals = rng.normal(0, 1.5, size=(4, 4))
        w = {g: tuple(vals[j]) for j, g in enumerate("ifgo")}
        p = LstmParams(Tensor(vals[:, 0:1].copy()), Tensor(vals[:, 1:2].copy()),
                       Tensor(vals[:, 2].copy()), Tensor(vals[:, 3].copy()))
        x, h0, c0 = rng.normal(size=3)
        h, s = lstm_step(p, np.array([x]), LstmState(Tensor(np.array([h0])), Tensor(np.array([c0]))))
        eh, ec = scalar_lstm(w, x, h0, c0)
        worst = max(worst, abs(h.item() - eh), abs(s.c.item() - ec))
    assert worst < 1e-12


def test_zero_parameters_give_zero_hidden():
    p = LstmParams.zeros(5, 3)
    h, s = lstm_step(p, np.ones(5) * 7.0, LstmState.zeros(3))
    assert np.all(h.data == 0.0)
    assert np.all(s.c.data == 0.0)
    assert np.all(lstm_window(p, np.random.default_rng(1).normal(size=(6, 5))).data == 0.0)


def test_batched_step_matches_rows():
    rng = np.random.default_rng(2)
    p = LstmParams.init(4, 3, rng)
    X = rng.normal(size=(5, 4))
    s = LstmState(Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 3))))
    hb, _ = lstm_step(p, X, s)
    for r in range(5):
        hr, _ = lstm_step(p, X[r], LstmState(Tensor(s.h.data[r]), Tensor(s.c.data[r])))
        assert np.allclose(hb.data[r], hr.data, atol=1e-14)


def test_window_equals_manual_fold():
    rng = np.random.default_rng(3)
    p = LstmParams.init(4, 3, rng)
    xs = [rng.normal(size=4) for _ in range(5)]
    s = LstmState.zeros(3)
    for x in xs:
        h, s = lstm_step(p, x, s)
    assert np.allclose(lstm_window(p, xs).data, h.data, atol=1e-14)
    assert np.allclose(lstm_window(p, np.stack(xs)).data, h.data, atol=1e-14)


def test_pad_window_front_pads_and_truncates():
    xs = [Tensor(np.full(2, float(i))) for i in range(3)]
    out = pad_window(xs, 5, 2)
    assert len(out) == 5
    assert np.all(out[0].data == 0) and np.all(out[1].data == 0)
    assert out[2] is xs[0]
    assert [t.data[0] for t in pad_window(xs, 2, 2)] == [1.0, 2.0]


def test_shape_validation():
    with pytest.raises(nd.ShapeError):
        LstmParams(Tensor(np.zeros((8, 3))), Tensor(np.zeros((8, 3))), Tensor(np.zeros(8)), Tensor(np.zeros(8)))
    p = LstmParams.zeros(3, 2)
    with pytest.raises(nd.ShapeError):
        lstm_step(p, np.zeros(4), LstmState.zeros(2))
    with pytest.raises(ValueError):
        lstm_window(p, [])


def test_gate_view_order():
    p = LstmParams.init(2, 3, np.random.default_rng(4))
    assert np.array_equal(p.gate("f")["W_i"], p.w_ih.data[3:6])
    assert np.array_equal(p.gate("o")["b_h"], p.b_hh.data[9:12])


def test_gradients_through_window():
    rng = np.random.default_rng(5)
    p = LstmParams.init(3, 4, rng)
    xs = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
    assert nd.grad_check(lambda: (lstm_window(p, xs) ** 2).sum(), list(p.tensors().values()) + [xs]) < 1e-6


def test_stacked_layers():
    rng = np.random.default_rng(6)
    layers = [LstmParams.init(3, 4, rng), LstmParams.init(4, 2, rng)]
    out = lstm_window(layers, rng.normal(size=(5, 3)))
    assert out.shape == (2,)
