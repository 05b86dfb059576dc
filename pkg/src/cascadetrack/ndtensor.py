"""Minimal dense tensor with tape-based reverse-mode differentiation.

Every trainable computation in the package (conv backbone, heads, LSTM,
losses) is composed from the primitives defined here. Storage is a numpy
array in row-major order. There is no general broadcasting: operands of an
elementwise op must have identical shapes, except that ``+``/``-`` accept a
right operand whose shape equals the trailing dimensions of the left one
(bias add). Use :func:`expand` for any other expansion.

Gradients are accumulated into ``Tensor.grad`` of leaf tensors with
``requires_grad=True``; call :meth:`Tensor.zero_grad` (or
:func:`zero_grads`) before a fresh backward pass.
"""
from __future__ import annotations

import contextlib
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True
_CHECKED = False


class ShapeError(ValueError):
    """Raised when operand dimensions do not agree."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    with _grad_mode(False):
        yield


@contextlib.contextmanager
def enable_grad():
    """Re-enable tape recording, e.g. for a gradient needed inside a no_grad block."""
    with _grad_mode(True):
        yield


@contextlib.contextmanager
def _grad_mode(flag: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = flag
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_checked(flag: bool) -> bool:
    """Enable/disable NaN/inf checking after every op. Returns the old value."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = bool(flag)
    return prev


@contextlib.contextmanager
def checked():
    prev = set_checked(True)
    try:
        yield
    finally:
        set_checked(prev)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite {what} detected in checked mode")


class Tensor:
    """Dense real array on the differentiation tape."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> list:
        return self.data.ravel().tolist()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _CHECKED:
        _check_finite(data, "value")
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _shape_err(op, a, b):
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _unbias(grad, shape):
    """Sum a gradient down to a trailing-dimension (bias) shape."""
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _coerce(a: Tensor, b, op: str, allow_bias: bool):
    if isinstance(b, Tensor):
        if b.shape == a.shape:
            return b
        if allow_bias and b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
            return b
        raise _shape_err(op, a.shape, b.shape)
    arr = np.asarray(b, dtype=a.data.dtype)
    if arr.ndim == 0 or arr.shape == a.shape:
        return Tensor(arr)
    raise _shape_err(op, a.shape, arr.shape)


# -- elementwise arithmetic -----------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(a, b, "add", allow_bias=True)
    bshape = b.shape

    def bw(g):
        return g, _unbias(g, bshape) if bshape else np.sum(g)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(a, b, "sub", allow_bias=True)
    bshape = b.shape

    def bw(g):
        return g, -(_unbias(g, bshape) if bshape else np.sum(g))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(a, b, "mul", allow_bias=False)
    ad, bd = a.data, b.data

    def bw(g):
        gb = g * ad
        return g * bd, gb if bd.ndim else np.sum(gb)

    return _node(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(a, b, "div", allow_bias=False)
    ad, bd = a.data, b.data

    def bw(g):
        gb = -g * ad / (bd * bd)
        return g / bd, gb if bd.ndim else np.sum(gb)

    return _node(ad / bd, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def _sigmoid_np(x):
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * _sigmoid_np(x),))


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def smooth_l1(a) -> Tensor:
    """Robust loss 0.5*u^2 for |u| < 1, |u| - 0.5 otherwise (elementwise)."""
    a = as_tensor(a)
    u = a.data
    small = np.abs(u) < 1
    out = np.where(small, 0.5 * u * u, np.abs(u) - 0.5)
    return _node(out, (a,), lambda g: (g * np.where(small, u, np.sign(u)),))


# -- reductions and shape ops --------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, idx) -> Tensor:
    """Indexing/gather; backward scatters with accumulation."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bw)


def expand(a, shape) -> Tensor:
    """Explicit numpy-style broadcast to ``shape``."""
    a = as_tensor(a)
    src = a.shape
    out = np.broadcast_to(a.data, shape).copy()

    def bw(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _node(out, (a,), bw)


def concat(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in ts], axis=axis), ts, bw)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise _shape_err("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), bw)


def affine(x, W, b) -> Tensor:
    """``W @ x + b`` for a vector x, or row-wise ``x @ W.T + b`` for a batch."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(
            f"affine: x{tuple(x.shape)} W{tuple(W.shape)} b{tuple(b.shape)} "
            f"(need x[..., n], W[m, n], b[m])"
        )
    if x.ndim > 2:
        lead = x.shape[:-1]
        y = affine(reshape(x, (-1, x.shape[-1])), W, b)
        return reshape(y, lead + (W.shape[0],))
    xd, Wd = x.data, W.data

    def bw(g):
        if xd.ndim == 1:
            return Wd.T @ g, np.outer(g, xd), g
        return g @ Wd, g.T @ xd, g.sum(axis=0)

    return _node(xd @ Wd.T + b.data, (x, W, b), bw)


# -- convolution ----------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, k, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """Zero-padded 2D cross-correlation.

    Shapes: ``x[H, W]`` with ``k[kh, kw]`` gives ``[H', W']``; the batched
    form ``x[B, C, H, W]`` with ``k[O, C, kh, kw]`` gives ``[B, O, H', W']``
    and takes an optional ``bias[O]``.
    """
    x, k = as_tensor(x), as_tensor(k)
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    if x.ndim == 2 and k.ndim == 2:
        y = conv2d(reshape(x, (1, 1) + x.shape), reshape(k, (1, 1) + k.shape), stride, pad)
        return reshape(y, y.shape[2:])
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise _shape_err("conv2d", x.shape, k.shape)
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    Ho, Wo = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [B, C, Ho, Wo, kh, kw] -> cols [B*Ho*Wo, C*kh*kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    kmat = k.data.reshape(O, C * kh * kw)
    out = (cols @ kmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = [x, k]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise _shape_err("conv2d bias", (O,), bias.shape)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)
    xshape, xdtype = xp.shape, x.data.dtype

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gk = (gm.T @ cols).reshape(k.shape)
        gx = None
        if x.requires_grad:
            gcols = (gm @ kmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xshape, dtype=xdtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(out, parents, bw)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    x = as_tensor(x)
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bw(g):
        s = g.shape[:-2] + (g.shape[-2] // factor, factor, g.shape[-1] // factor, factor)
        return (g.reshape(s).sum(axis=(-3, -1)),)

    return _node(out, (x,), bw)


# -- backward pass --------------------------------------------------------

def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if _CHECKED:
            _check_finite(g, "grad")
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over entries of |analytic - central difference| / max(1, |analytic|)."""
    zero_grads(params)
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        an = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = f().item()
            flat[i] = orig - h
            with no_grad():
                fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, abs(an[i] - numeric) / max(1.0, abs(an[i])))
    zero_grads(params)
    return worst


# -- parameter checkpoints ------------------------------------------------
#
# Flat binary layout, little endian:
#   magic  b"NDTP\x01"
#   u32    record count
#   per record: u32 name length, utf-8 name, u32 ndim, u64 * ndim extents,
#               float64 * prod(extents) values (row-major)

_MAGIC = b"NDTP\x01"


def dump_params(named) -> bytes:
    items = list(named.items()) if hasattr(named, "items") else list(named)
    parts = [_MAGIC, struct.pack("<I", len(items))]
    for name, value in items:
        # not ascontiguousarray: it promotes 0-d arrays to 1-d
        arr = np.array(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def parse_params(buf: bytes, offset: int = 0) -> tuple[OrderedDict, int]:
    if buf[offset:offset + len(_MAGIC)] != _MAGIC:
        raise ValueError("not a parameter block (bad magic)")
    pos = offset + len(_MAGIC)
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return out, pos


def save_params(path, named) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_params(named))


def load_params(path) -> OrderedDict:
    with open(path, "rb") as fh:
        return parse_params(fh.read())[0]
