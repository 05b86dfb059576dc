"""LSTM cell and fixed-length window application."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

GATES = ("i", "f", "g", "o")


@dataclass
class LstmParams:
    """Gate parameters stacked in (i, f, g, o) order.

    ``w_ih`` is ``[4*hidden, input]``, ``w_hh`` is ``[4*hidden, hidden]``,
    ``b_ih`` and ``b_hh`` are ``[4*hidden]``.
    """

    w_ih: Tensor
    w_hh: Tensor
    b_ih: Tensor
    b_hh: Tensor

    def __post_init__(self):
        four_h, n_in = self.w_ih.shape
        if four_h % 4 or self.w_hh.shape != (four_h, four_h // 4) \
                or self.b_ih.shape != (four_h,) or self.b_hh.shape != (four_h,):
            raise nd.ShapeError(
                f"inconsistent LSTM shapes: w_ih{self.w_ih.shape} w_hh{self.w_hh.shape} "
                f"b_ih{self.b_ih.shape} b_hh{self.b_hh.shape}"
            )

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]

    def gate(self, name: str) -> dict:
        """Per-gate view (numpy) of W_i*, W_h*, b_i*, b_h*."""
        j = GATES.index(name)
        sl = slice(j * self.hidden, (j + 1) * self.hidden)
        return {
            "W_i": self.w_ih.data[sl], "W_h": self.w_hh.data[sl],
            "b_i": self.b_ih.data[sl], "b_h": self.b_hh.data[sl],
        }

    def tensors(self) -> dict:
        return {"w_ih": self.w_ih, "w_hh": self.w_hh, "b_ih": self.b_ih, "b_hh": self.b_hh}

    @classmethod
    def init(cls, input_size: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        bound = 1.0 / np.sqrt(hidden)

        def u(*shape):
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

        return cls(u(4 * hidden, input_size), u(4 * hidden, hidden), u(4 * hidden), u(4 * hidden))

    @classmethod
    def zeros(cls, input_size: int, hidden: int):
        z = np.zeros
        return cls(Tensor(z((4 * hidden, input_size))), Tensor(z((4 * hidden, hidden))),
                   Tensor(z(4 * hidden)), Tensor(z(4 * hidden)))


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None, dtype=np.float64):
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))


def lstm_step(p: LstmParams, x_t, s: LstmState):
    """One recurrence step; ``x_t`` is ``[input]`` or a batch ``[n, input]``.

    Returns ``(h_t, LstmState(h_t, c_t))``.
    """
    x_t = nd.as_tensor(x_t)
    if x_t.shape[-1] != p.input_size or s.h.shape[-1] != p.hidden or s.h.shape != s.c.shape \
            or x_t.shape[:-1] != s.h.shape[:-1]:
        raise nd.ShapeError(
            f"lstm_step: x{x_t.shape} h{s.h.shape} c{s.c.shape} for input={p.input_size}, hidden={p.hidden}"
        )
    H = p.hidden
    z = nd.affine(x_t, p.w_ih, p.b_ih) + nd.affine(s.h, p.w_hh, p.b_hh)
    if z.ndim == 1:
        zi, zf, zg, zo = z[0:H], z[H:2 * H], z[2 * H:3 * H], z[3 * H:]
    else:
        zi, zf, zg, zo = z[:, 0:H], z[:, H:2 * H], z[:, 2 * H:3 * H], z[:, 3 * H:]
    i_t = nd.sigmoid(zi)
    f_t = nd.sigmoid(zf)
    g_t = nd.tanh(zg)
    o_t = nd.sigmoid(zo)
    c_t = f_t * s.c + i_t * g_t
    h_t = o_t * nd.tanh(c_t)
    return h_t, LstmState(h_t, c_t)


def pad_window(xs: list, length: int, size: int, batch: int | None = None, dtype=np.float64) -> list:
    """Front-pad a short history with zero feature vectors."""
    if len(xs) > length:
        return list(xs[-length:])
    shape = (size,) if batch is None else (batch, size)
    pad = [Tensor(np.zeros(shape, dtype=dtype)) for _ in range(length - len(xs))]
    return pad + list(xs)


def lstm_window(p, xs, s0: LstmState | None = None) -> Tensor:
    """Fold :func:`lstm_step` over a window and return the final hidden vector.

    ``xs`` is a list of per-frame inputs (oldest first) or a tensor whose
    second-to-last axis is time (``[T, input]`` or ``[n, T, input]``).
    ``p`` may be a list of :class:`LstmParams` for a stacked LSTM.
    """
    layers = p if isinstance(p, (list, tuple)) else [p]
    if isinstance(xs, Tensor) or isinstance(xs, np.ndarray):
        xs = nd.as_tensor(xs)
        T = xs.shape[-2]
        xs = [xs[..., t, :] for t in range(T)]
    if len(xs) == 0:
        raise ValueError("lstm_window: empty window")
    seq = [nd.as_tensor(x) for x in xs]
    batch = None if seq[0].ndim == 1 else seq[0].shape[0]
    for li, lp in enumerate(layers):
        s = s0 if (s0 is not None and li == 0) else LstmState.zeros(lp.hidden, batch, seq[0].data.dtype)
        outs = []
        for x in seq:
            h, s = lstm_step(lp, x, s)
            outs.append(h)
        seq = outs
    return seq[-1]
