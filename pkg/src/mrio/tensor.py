"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside an active :class:`Tape` append a node whenever one
of their inputs requires a gradient.  ``backward`` walks the tape in reverse.
"""

from __future__ import annotations

import os
import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DEBUG = bool(os.environ.get("MRIO_DEBUG"))

_STATE = threading.local()


def _tapes() -> list:
    # each thread records onto its own stack of tapes
    if not hasattr(_STATE, "tapes"):
        _STATE.tapes = []
    return _STATE.tapes


class ContractError(ValueError):
    """Raised when an operation's preconditions on shapes or arguments fail."""


class DomainError(ValueError):
    """Raised when an input falls outside the mathematical domain of an op."""


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")
    # make ``ndarray <op> Tensor`` fall through to the reflected Tensor ops
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

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

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return tabs(self)


class Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple, output: Tensor, backward: Callable):
        self.inputs = inputs
        # weak, so a finished graph is freed by reference counting alone
        self.output = weakref.ref(output)
        self.backward = backward


class Tape:
    """Ordered record of operations; usable as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes().remove(self)

    def gradient(self, loss: Tensor, params: Sequence[Tensor] | None = None):
        return backward(self, loss, params)


@contextmanager
def no_tape():
    """Suspend recording in this thread (results are constants)."""
    stack = _tapes()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple, grad_fn: Callable) -> Tensor:
    if DEBUG and not np.all(np.isfinite(out_data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError("non-finite output from finite inputs")
    out = Tensor(out_data)
    tapes = _tapes()
    if tapes and tapes[-1] is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(inputs, out, grad_fn)
        out.node = node
        tapes[-1].nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Reverse sweep over ``tape``.

    Returns a dict mapping each requested parameter (or, when ``params`` is
    None, every leaf that requires grad) to its gradient array.  Parameters
    that did not participate get zeros.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        out = node.output()
        g = None if out is None else grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                leaves[id(t)] = t
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    if params is None:
        return {t: grads[id(t)] for t in leaves.values()}
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}


def grad(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[Tensor, dict]:
    """Run ``fn`` under a fresh tape and return ``(loss, gradients)``."""
    with Tape() as tape:
        loss = fn()
    return loss, backward(tape, loss, params)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise ContractError("power takes a constant exponent")
    e = float(exponent)
    if e != int(e) and np.any(a.data < 0):
        raise DomainError("fractional power of a negative value")
    if e < 0 and np.any(a.data == 0):
        raise DomainError("negative power of zero")
    out = a.data ** e
    return _record(out, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only where the value was inside [lo, hi]."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    r2 = x.data ** 2 + y.data ** 2
    return _record(np.arctan2(y.data, x.data), (y, x),
                   lambda g: (_unbroadcast(g * x.data / r2, y.shape),
                              _unbroadcast(-g * y.data / r2, x.shape)))


def where(mask, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _record(np.where(mask, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                              _unbroadcast(np.where(mask, 0.0, g), b.shape)))


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), grad_fn)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size // max(out.size, 1)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record(out, (a,), grad_fn)


def tmax(a, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _record(out, (a,), grad_fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(out, (a,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------- structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shapes {a.shape} @ {b.shape}")
    return _record(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _record(a.data[index], (a,), grad_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def gather(a, index: np.ndarray, axis: int) -> Tensor:
    """``take_along_axis`` with the index's extent 1 along ``axis`` squeezed."""
    a = as_tensor(a)
    idx = np.expand_dims(index, axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _record(out, (a,), grad_fn)


def linear_map(matrix: sp.spmatrix, x) -> Tensor:
    """Apply a constant sparse matrix along the leading axis of ``x``."""
    x = as_tensor(x)
    m = sp.csr_matrix(matrix)
    mt = m.T.tocsr()
    flat = x.data.reshape(x.shape[0], -1)
    out = np.asarray(m @ flat).reshape((m.shape[0],) + x.shape[1:])
    return _record(out, (x,),
                   lambda g: (np.asarray(mt @ g.reshape(g.shape[0], -1)).reshape(x.shape),))


# ---------------------------------------------------------------- convolution


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 on an ``H x W x C`` map.

    ``w`` has shape ``(3, 3, Cin, Cout)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[2]:
        raise ContractError(f"conv2d shapes {x.shape} * {w.shape}")
    H, W, cin = x.shape
    cout = w.shape[3]
    ho, wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((ho, wo, cout))
    taps = []
    for i in range(3):
        for j in range(3):
            xs = xp[i:i + stride * ho:stride, j:j + stride * wo:stride, :].reshape(-1, cin)
            taps.append(xs)
            out += (xs @ w.data[i, j]).reshape(ho, wo, cout)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out += b.data
        inputs = (x, w, b)

    def grad_fn(g):
        g2 = g.reshape(-1, cout)
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for k, xs in enumerate(taps):
            i, j = divmod(k, 3)
            gw[i, j] = xs.T @ g2
            gxp[i:i + stride * ho:stride, j:j + stride * wo:stride, :] += (
                (g2 @ w.data[i, j].T).reshape(ho, wo, cin))
        grads = (gxp[1:-1, 1:-1, :], gw)
        if b is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return _record(out, inputs, grad_fn)


def conv3d(x, w, b=None, dilation: int = 1) -> Tensor:
    """3x3x3 'same' convolution on a ``D x H x W x C`` volume.

    ``w`` has shape ``(3, 3, 3, Cin, Cout)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.shape[:3] != (3, 3, 3) or w.shape[3] != x.shape[3]:
        raise ContractError(f"conv3d shapes {x.shape} * {w.shape}")
    D, H, W, cin = x.shape
    cout = w.shape[4]
    r = dilation
    xp = np.pad(x.data, ((r, r), (r, r), (r, r), (0, 0)))
    out = np.zeros((D * H * W, cout))
    offsets = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]
    for i, j, k in offsets:
        xs = xp[i * r:i * r + D, j * r:j * r + H, k * r:k * r + W, :].reshape(-1, cin)
        out += xs @ w.data[i, j, k]
    out = out.reshape(D, H, W, cout)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out += b.data
        inputs = (x, w, b)

    def grad_fn(g):
        g2 = g.reshape(-1, cout)
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for i, j, k in offsets:
            xs = xp[i * r:i * r + D, j * r:j * r + H, k * r:k * r + W, :].reshape(-1, cin)
            gw[i, j, k] = xs.T @ g2
            gxp[i * r:i * r + D, j * r:j * r + H, k * r:k * r + W, :] += (
                (g2 @ w.data[i, j, k].T).reshape(D, H, W, cin))
        grads = (gxp[r:r + D, r:r + H, r:r + W, :], gw)
        if b is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return _record(out, inputs, grad_fn)


# ---------------------------------------------------------------- sampling


def bilinear_weights(coords: np.ndarray, height: int, width: int):
    """Sparse bilinear interpolation matrix for pixel-centre coordinates.

    ``coords`` is ``(N, 2)`` as (x, y).  Samples whose 2x2 footprint leaves
    the raster are clamped and flagged invalid; their rows are zero.
    Returns ``(matrix, valid)``.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    x, y = coords[:, 0], coords[:, 1]
    finite = np.isfinite(x) & np.isfinite(y)
    valid = finite & (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)
    xc = np.clip(np.where(finite, x, 0.0), 0, width - 1)
    yc = np.clip(np.where(finite, y, 0.0), 0, height - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(height - 2, 0))
    fx, fy = xc - x0, yc - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    rows = np.repeat(np.arange(n), 4)
    cols = np.stack([y0 * width + x0, y0 * width + x1,
                     y1 * width + x0, y1 * width + x1], axis=1).reshape(-1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy),
                    (1 - fx) * fy, fx * fy], axis=1)
    wts = (wts * valid[:, None]).reshape(-1)
    mat = sp.csr_matrix((wts, (rows, cols)), shape=(n, height * width))
    return mat, valid


def bilinear_sample(feat, coords: np.ndarray):
    """Sample an ``H x W x F`` map at continuous (x, y) pixel coordinates.

    Returns ``(samples (N, F), valid mask)``; gradients flow to ``feat``.
    """
    feat = as_tensor(feat)
    H, W = feat.shape[:2]
    mat, valid = bilinear_weights(coords, H, W)
    flat = reshape(feat, (H * W,) + feat.shape[2:])
    return linear_map(mat, flat), valid


def trilinear_weights(points: np.ndarray, res: int):
    """Sparse trilinear matrix for a cell-centred ``res^3`` grid on [0, 1]^3.

    Voxel ``(i, j, k)`` has its centre at ``((i, j, k) + 0.5) / res``; the
    first index runs along x.  Queries are clamped to the centre lattice.
    """
    pts = np.asarray(points, dtype=np.float64)
    u = np.clip(pts * res - 0.5, 0.0, res - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
    f = u - i0
    n = pts.shape[0]
    rows, cols, wts = [], [], []
    for corner in range(8):
        d = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = i0 + d
        w = np.prod(np.where(d == 1, f, 1.0 - f), axis=1)
        rows.append(np.arange(n))
        cols.append((idx[:, 0] * res + idx[:, 1]) * res + idx[:, 2])
        wts.append(w)
    mat = sp.csr_matrix((np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(n, res ** 3))
    return mat


def trilinear_sample(volume, points: np.ndarray) -> Tensor:
    """Sample a ``G x G x G x F`` volume at points of the unit cube."""
    volume = as_tensor(volume)
    g = volume.shape[0]
    mat = trilinear_weights(points, g)
    flat = reshape(volume, (g ** 3,) + volume.shape[3:])
    return linear_map(mat, flat)


def cross(a, b) -> Tensor:
    """Row-wise cross product of two ``(N, 3)`` tensors."""
    ax, ay, az = a[:, 0], a[:, 1], a[:, 2]
    bx, by, bz = b[:, 0], b[:, 1], b[:, 2]
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=1)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if axis < 0:
        axis += ts[0].ndim + 1
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)
