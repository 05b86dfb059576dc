"""Training objectives: attention box regression, large-margin classification,
large-margin softmax mask loss, robust center regression and their weighted sum.

All tensor-valued losses return scalar :class:`~cascadetrack.ndtensor.Tensor`
nodes so they can be minimized with :func:`~cascadetrack.ndtensor.backward`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    cls: float = 0.2
    mask: float = 0.2
    box: float = 0.6

    def __post_init__(self):
        if min(self.cls, self.mask, self.box) < 0:
            raise ValueError(f"loss weights must be nonnegative: {self}")


@dataclass(frozen=True)
class MarginConfig:
    margin_gamma: float = 1.0
    eps: float = 1e-6
    layers: tuple = ("input", "hidden")

    def __post_init__(self):
        if self.eps <= 0 or self.margin_gamma <= 0:
            raise ValueError("margin_gamma and eps must be positive")


@dataclass(frozen=True)
class MaskLossConfig:
    m: int = 2
    lam: float = 1e-4

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"m must be an integer >= 1, got {self.m}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


def _delta_tensor(d) -> Tensor:
    if isinstance(d, Tensor):
        return d
    if hasattr(d, "as_tuple"):
        return Tensor(np.array(d.as_tuple(), dtype=np.float64))
    return Tensor(np.asarray(d, dtype=np.float64))


def attention_loss(pred, gt, U=None, V=None, N: int = 0) -> Tensor:
    """Squared delta error plus intersection-normalized patch discrepancy.

    ``pred``/``gt`` are box deltas (BoxDelta, arrays or tensors, optionally
    batched as ``[n, 4]``). ``U`` and ``V`` are the image patches compared
    over the ``N`` intersection pixels; with ``N == 0`` the patch term is
    dropped and only the delta term is returned.
    """
    p, g = _delta_tensor(pred), _delta_tensor(gt)
    diff = p - g
    loss = (diff * diff).sum()
    if U is None or V is None:
        return loss
    if N <= 0:
        log.info("attention_loss: empty box intersection, patch term omitted")
        return loss
    U, V = nd.as_tensor(U), nd.as_tensor(V)
    if U.shape != V.shape:
        raise nd.ShapeError(f"attention_loss: patch shapes differ {U.shape} vs {V.shape}")
    pd = U - V
    return loss + (pd * pd).sum() * (1.0 / N)


def margin_cls_loss(f_scores, layer_grads: Mapping, true_class, cfg: MarginConfig = MarginConfig()) -> Tensor:
    """Hinge on the score gap normalized by the per-layer gradient gap.

    ``f_scores`` is ``[n, 2]`` (binary task); ``layer_grads`` maps every layer
    id in ``cfg.layers`` to ``(grad_o, grad_t)`` arrays of shape ``[n, d]``,
    the gradients of the non-true-class and true-class scores with respect to
    that layer's activations. They enter as constants.
    """
    f = nd.as_tensor(f_scores)
    if f.ndim == 1:
        f = f.reshape(1, -1)
    t = np.atleast_1d(np.asarray(true_class, dtype=int))
    n = f.shape[0]
    if f.shape[1] != 2 or t.shape != (n,):
        raise nd.ShapeError(f"margin_cls_loss: scores {f.shape} vs labels {t.shape}")
    rows = np.arange(n)
    fo = f[rows, 1 - t]
    ft = f[rows, t]
    gap = fo - ft
    total = None
    for layer in cfg.layers:
        if layer not in layer_grads:
            raise KeyError(f"margin_cls_loss: missing gradient for layer {layer!r}")
        go, gt = layer_grads[layer]
        d = np.asarray(go, dtype=np.float64).reshape(n, -1) - np.asarray(gt, dtype=np.float64).reshape(n, -1)
        denom = cfg.eps + np.sqrt((d * d).sum(axis=1))
        term = nd.relu(gap * (1.0 / denom) + cfg.margin_gamma).sum()
        total = term if total is None else total + term
    return total


def phi(theta: float, m: int) -> float:
    """Piecewise angular margin function, monotone nonincreasing on [0, pi]."""
    if not 0.0 <= theta <= math.pi:
        raise ValueError(f"theta must lie in [0, pi], got {theta}")
    if int(m) != m or m < 1:
        raise ValueError(f"m must be an integer >= 1, got {m}")
    k = min(int(math.floor(theta * m / math.pi)), m - 1)
    return (-1) ** k * math.cos(m * theta) - 2 * k


def _chebyshev(c: Tensor, m: int) -> Tensor:
    # cos(m*theta) as a polynomial in cos(theta)
    prev, cur = Tensor(np.ones_like(c.data)), c
    if m == 0:
        return prev
    for _ in range(m - 1):
        prev, cur = cur, c * cur * 2.0 - prev
    return cur


def phi_from_cos(c: Tensor, m: int) -> Tensor:
    """``phi(arccos(c))`` as a differentiable function of the cosine.

    The branch index k is piecewise constant, so gradients flow only through
    the Chebyshev form of cos(m*theta); this avoids arccos' singularity.
    """
    theta = np.arccos(np.clip(c.data, -1.0, 1.0))
    k = np.minimum(np.floor(theta * m / math.pi), m - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    return _chebyshev(c, m) * sign - 2.0 * k


def _row_norms(x: Tensor) -> Tensor:
    return nd.sqrt((x * x).sum(axis=1))


def mask_loss(x, W, y, cfg: MaskLossConfig = MaskLossConfig(), return_skipped: bool = False):
    """Mean large-margin softmax cross-entropy over pixels plus ``lam * ||W||_F^2``.

    ``x`` holds per-pixel feature vectors ``[n, d]``, ``W`` the class weight
    vectors ``[k, d]`` (row j scores class j) and ``y`` integer labels.
    Pixels with a zero feature vector have no defined angle; they are skipped
    and counted.
    """
    x, W = nd.as_tensor(x), nd.as_tensor(W)
    y = np.asarray(y, dtype=int).reshape(-1)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1] or y.shape[0] != x.shape[0]:
        raise nd.ShapeError(f"mask_loss: x{x.shape} W{W.shape} y{y.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1))
    keep = np.flatnonzero(norms > 0)
    skipped = x.shape[0] - keep.size
    if skipped:
        log.debug("mask_loss: skipped %d zero-norm pixel features", skipped)
    penalty = (W * W).sum() * cfg.lam
    if keep.size == 0:
        out = penalty
        return (out, skipped) if return_skipped else out
    if skipped:
        x = x[keep]
        y = y[keep]
    n, k = x.shape[0], W.shape[0]
    rows = np.arange(n)
    dots = x @ W.T                                   # |w_j||x| cos(theta_j)
    xn = _row_norms(x)
    wn = _row_norms(W)
    wy = wn[y]                                       # |w_y|
    scale = wy * xn
    cos_y = dots[rows, y] / scale
    target = scale * phi_from_cos(cos_y, cfg.m)
    onehot = np.zeros((n, k))
    onehot[rows, y] = 1.0
    logits = dots * (1.0 - onehot) + nd.expand(target.reshape(n, 1), (n, k)) * onehot
    shift = logits.data.max(axis=1, keepdims=True)
    lse = nd.log(nd.exp(logits - np.broadcast_to(shift, (n, k))).sum(axis=1)) + shift[:, 0]
    out = (lse - target).mean() + penalty
    return (out, skipped) if return_skipped else out


def smooth_l1(u):
    """Robust loss; floats in, float out, tensors in, tensor out."""
    if isinstance(u, Tensor):
        return nd.smooth_l1(u)
    a = abs(u)
    return 0.5 * u * u if a < 1 else a - 0.5


def box_loss(pred, target) -> Tensor:
    """Sum of robust losses on center residuals; ``pred``/``target`` are ``[N, 2]`` (x, y)."""
    p, t = nd.as_tensor(pred), nd.as_tensor(target)
    if p.shape != t.shape:
        raise ValueError(f"box_loss: prediction {p.shape} and target {t.shape} differ")
    return nd.smooth_l1(t - p).sum()


def combined_loss(l_cls, l_mask, l_box, w: LossWeights = LossWeights()):
    terms = (w.cls, l_cls), (w.mask, l_mask), (w.box, l_box)
    total = None
    for weight, term in terms:
        part = term * weight
        total = part if total is None else total + part
    return total
