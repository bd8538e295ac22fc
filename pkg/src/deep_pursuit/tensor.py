"""Dense float64 arrays with a small reverse-mode differentiation tape.

Only the operators needed by unrolled pursuit networks are provided. Shapes
must match exactly; the one broadcasting rule is scalar-times-tensor. Ops that
act per channel (thresholds, scaling) take an explicit ``(C,)`` vector and use
the channel axis convention ``0`` for ``(d,)``/``(C, H, W)`` inputs and ``1``
for batched ``(N, d)``/``(N, C, H, W)`` inputs.

A node only records its parents when at least one input requires a gradient,
so pure inference runs without building a graph.
"""

from __future__ import annotations

import contextlib
import functools
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import DimensionError, GraphError, NumericIncident

__all__ = [
    "Tensor",
    "add",
    "sub",
    "mul",
    "reciprocal",
    "linear_map",
    "adjoint_map",
    "conv2d",
    "conv_transpose2d",
    "conv_matrix",
    "conv_output_hw",
    "embed",
    "embed_adjoint",
    "channel_scale",
    "nonneg_soft_threshold",
    "soft_threshold",
    "reduce_global_average_pool",
    "reshape",
    "total",
    "sum_squares",
    "dot",
    "absolute",
    "channel_sum",
    "inverse_sqrt",
    "cross_entropy",
    "backward",
    "grad_check",
    "graph_fingerprint",
    "set_checked",
]

_CHECKED = True


def set_checked(flag: bool) -> bool:
    """Toggle finiteness checks on user-created tensors; returns previous value."""
    global _CHECKED
    previous, _CHECKED = _CHECKED, bool(flag)
    return previous


class Tensor:
    """Immutable float64 array that may participate in a differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise NumericIncident("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple = ()
        self._backward = None

    @classmethod
    def _result(cls, data: np.ndarray, op: str, parents: tuple, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.parents = parents
            out._backward = backward
        else:
            out.parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, "leaf", (), None)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._result(np.asarray(x, dtype=np.float64), "const", (), None)


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.data.ndim == 0
    return np.ndim(x) == 0


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {a.shape} does not match {b.shape}")


# ----------------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if _is_scalar(b) and not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return Tensor._result(a.data + c, "add_const", (a,), lambda g: (g,))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    return Tensor._result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    return Tensor._result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Product of equal-shape tensors, or scalar (float or 0-d tensor) times tensor."""
    if not isinstance(b, Tensor):
        if not _is_scalar(b):
            raise DimensionError("mul: only scalar constants broadcast")
        a = _as_tensor(a)
        c = float(b)
        return Tensor._result(a.data * c, "scale", (a,), lambda g: (g * c,))
    a = _as_tensor(a)
    if a.ndim == 0 and b.ndim != 0:
        a, b = b, a
    if b.ndim == 0 and a.ndim != 0:
        s = b.data

        def back(g):
            return g * s, np.asarray(np.sum(g * a.data))

        return Tensor._result(a.data * s, "scalar_mul", (a, b), back)
    _check_same("mul", a, b)
    return Tensor._result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def reciprocal(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / a.data
    return Tensor._result(out, "reciprocal", (a,), lambda g: (-g * out * out,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return Tensor._result(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


# ----------------------------------------------------------------------------
# dense linear operators
# ----------------------------------------------------------------------------


def linear_map(B: Tensor, w: Tensor) -> Tensor:
    """Synthesis ``B w``; ``w`` is ``(d_in,)`` or a batch ``(N, d_in)``."""
    B, w = _as_tensor(B), _as_tensor(w)
    if B.ndim != 2 or w.ndim not in (1, 2) or w.shape[-1] != B.shape[1]:
        raise DimensionError(f"linear_map: operator {B.shape} cannot act on {w.shape}")
    Bd, wd = B.data, w.data
    out = Bd @ wd if wd.ndim == 1 else wd @ Bd.T

    def back(g):
        gB = (np.outer(g, wd) if wd.ndim == 1 else g.T @ wd) if B.requires_grad else None
        gw = (Bd.T @ g if wd.ndim == 1 else g @ Bd) if w.requires_grad else None
        return gB, gw

    return Tensor._result(out, "linear_map", (B, w), back)


def adjoint_map(B: Tensor, u: Tensor) -> Tensor:
    """Analysis ``B^T u``; ``u`` is ``(d_out,)`` or a batch ``(N, d_out)``."""
    B, u = _as_tensor(B), _as_tensor(u)
    if B.ndim != 2 or u.ndim not in (1, 2) or u.shape[-1] != B.shape[0]:
        raise DimensionError(f"adjoint_map: operator {B.shape} cannot act on {u.shape}")
    Bd, ud = B.data, u.data
    out = Bd.T @ ud if ud.ndim == 1 else ud @ Bd

    def back(g):
        gB = (np.outer(ud, g) if ud.ndim == 1 else ud.T @ g) if B.requires_grad else None
        gu = (Bd @ g if ud.ndim == 1 else g @ Bd.T) if u.requires_grad else None
        return gB, gu

    return Tensor._result(out, "adjoint_map", (B, u), back)


# ----------------------------------------------------------------------------
# convolution via patch matrices
# ----------------------------------------------------------------------------


def conv_output_hw(h: int, w: int, kernel: int, stride: int) -> tuple[int, int]:
    p = kernel // 2
    return (h + 2 * p - kernel) // stride + 1, (w + 2 * p - kernel) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    p = k // 2
    ho, wo = conv_output_hw(h, w, k, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                                  j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int) -> np.ndarray:
    n, c, h, w = shape
    p = k // 2
    ho, wo = conv_output_hw(h, w, k, stride)
    cols = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * (ho - 1) + 1 : stride,
               j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, i, j]
    return xp[:, :, p : p + h, p : p + w]


def _check_kernel(K: Tensor) -> int:
    if K.ndim != 4 or K.shape[2] != K.shape[3] or K.shape[2] not in (1, 3):
        raise DimensionError(f"unsupported kernel shape {K.shape}; only 3x3 and 1x1 accepted")
    return K.shape[2]


def _batched(x: Tensor, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank - 1:
        return x.data[None], True
    if x.ndim == rank:
        return x.data, False
    raise DimensionError(f"expected a {rank - 1}-d or {rank}-d array, got shape {x.shape}")


def conv2d(K: Tensor, x: Tensor, stride: int = 1) -> Tensor:
    """Zero-padded cross-correlation ``(C_out, C_in, k, k) * (N?, C_in, H, W)``."""
    K, x = _as_tensor(K), _as_tensor(x)
    k = _check_kernel(K)
    if stride not in (1, 2):
        raise DimensionError(f"stride must be 1 or 2, got {stride}")
    xd, single = _batched(x, 4)
    if xd.shape[1] != K.shape[1]:
        raise DimensionError(f"conv2d: kernel {K.shape} cannot act on input {x.shape}")
    n, _, h, w = xd.shape
    ho, wo = conv_output_hw(h, w, k, stride)
    kmat = K.data.reshape(K.shape[0], -1)
    cols = _im2col(xd, k, stride)
    out = np.matmul(kmat, cols).reshape(n, K.shape[0], ho, wo)

    def back(g):
        gr = (g[None] if single else g).reshape(n, K.shape[0], ho * wo)
        gK = np.tensordot(gr, cols, axes=([0, 2], [0, 2])).reshape(K.shape) if K.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _col2im(np.matmul(kmat.T, gr), xd.shape, k, stride)
            gx = gx[0] if single else gx
        return gK, gx

    return Tensor._result(out[0] if single else out, "conv2d", (K, x), back)


def conv_transpose2d(K: Tensor, y: Tensor, stride: int, out_hw: tuple[int, int]) -> Tensor:
    """Adjoint of :func:`conv2d` mapping ``(N?, C_out, H', W')`` back to ``(N?, C_in, H, W)``."""
    K, y = _as_tensor(K), _as_tensor(y)
    k = _check_kernel(K)
    yd, single = _batched(y, 4)
    h, w = out_hw
    n = yd.shape[0]
    ho, wo = conv_output_hw(h, w, k, stride)
    if yd.shape[1:] != (K.shape[0], ho, wo):
        raise DimensionError(f"conv_transpose2d: kernel {K.shape} cannot act on {y.shape} -> {out_hw}")
    kmat = K.data.reshape(K.shape[0], -1)
    yr = yd.reshape(n, K.shape[0], ho * wo)
    shape = (n, K.shape[1], h, w)
    out = _col2im(np.matmul(kmat.T, yr), shape, k, stride)

    def back(g):
        gb = g[None] if single else g
        gcols = _im2col(gb, k, stride)
        gK = np.tensordot(yr, gcols, axes=([0, 2], [0, 2])).reshape(K.shape) if K.requires_grad else None
        gy = None
        if y.requires_grad:
            gy = np.matmul(kmat, gcols).reshape(yd.shape)
            gy = gy[0] if single else gy
        return gK, gy

    return Tensor._result(out[0] if single else out, "conv_transpose2d", (K, y), back)


@functools.lru_cache(maxsize=64)
def _conv_matrix_index(kshape: tuple, in_shape: tuple, stride: int):
    o, c, k, _ = kshape
    _, h, w = in_shape
    p = k // 2
    ho, wo = conv_output_hw(h, w, k, stride)
    oo, cc, ii, jj, yy, xx = np.meshgrid(np.arange(o), np.arange(c), np.arange(k), np.arange(k),
                                         np.arange(ho), np.arange(wo), indexing="ij")
    r = yy * stride + ii - p
    s = xx * stride + jj - p
    ok = (r >= 0) & (r < h) & (s >= 0) & (s < w)
    rows = (cc * h + r) * w + s
    cols = (oo * ho + yy) * wo + xx
    kidx = ((oo * c + cc) * k + ii) * k + jj
    flat = rows[ok] * (o * ho * wo) + cols[ok]
    return flat, kidx[ok], (c * h * w, o * ho * wo)


def conv_matrix(K: Tensor, in_shape: tuple, stride: int) -> Tensor:
    """Dense matrix ``M`` with ``M @ vec(y) == vec(conv_transpose2d(K, y))``.

    Faster than im2col on small feature maps; the gradient flows back to ``K``.
    """
    K = _as_tensor(K)
    _check_kernel(K)
    flat, kidx, shape = _conv_matrix_index(K.shape, tuple(in_shape), stride)
    M = np.zeros(shape)
    M.flat[flat] = K.data.reshape(-1)[kidx]
    size = K.size

    def back(g):
        return (np.bincount(kidx, weights=g.reshape(-1)[flat], minlength=size).reshape(K.shape),)

    return Tensor._result(M, "conv_matrix", (K,), back)


# ----------------------------------------------------------------------------
# parameter-free channel embedding (projection shortcuts)
# ----------------------------------------------------------------------------


def _embed_data(xd: np.ndarray, c_out: int, stride: int, spatial: bool) -> np.ndarray:
    n, c = xd.shape[:2]
    if spatial:
        sub = xd[:, :, ::stride, ::stride]
        out = np.zeros((n, c_out) + sub.shape[2:])
        out[:, :c] = sub
    else:
        out = np.zeros((n, c_out))
        out[:, :c] = xd
    return out


def _embed_adjoint_data(yd: np.ndarray, c_in: int, stride: int, out_hw) -> np.ndarray:
    n = yd.shape[0]
    if yd.ndim == 4:
        out = np.zeros((n, c_in) + tuple(out_hw))
        out[:, :, ::stride, ::stride] = yd[:, :c_in]
        return out
    return yd[:, :c_in].copy()


def embed(x: Tensor, c_out: int, stride: int = 1) -> Tensor:
    """Spatial subsampling by ``stride`` followed by zero channel padding to ``c_out``."""
    x = _as_tensor(x)
    spatial = x.ndim in (3, 4)
    xd, single = _batched(x, 4 if spatial else 2)
    if c_out < xd.shape[1]:
        raise DimensionError(f"embed: cannot embed {xd.shape[1]} channels into {c_out}")
    out = _embed_data(xd, c_out, stride, spatial)
    hw = xd.shape[2:]

    def back(g):
        gb = g[None] if single else g
        gx = _embed_adjoint_data(gb, xd.shape[1], stride, hw)
        return (gx[0] if single else gx,)

    return Tensor._result(out[0] if single else out, "embed", (x,), back)


def embed_adjoint(y: Tensor, c_in: int, stride: int = 1, out_hw=()) -> Tensor:
    """Adjoint of :func:`embed`: crop channels, zero-fill the skipped pixels."""
    y = _as_tensor(y)
    spatial = y.ndim in (3, 4)
    yd, single = _batched(y, 4 if spatial else 2)
    out = _embed_adjoint_data(yd, c_in, stride, out_hw)
    c_out = yd.shape[1]

    def back(g):
        gb = g[None] if single else g
        gy = _embed_data(gb, c_out, stride, spatial)
        return (gy[0] if single else gy,)

    return Tensor._result(out[0] if single else out, "embed_adjoint", (y,), back)


# ----------------------------------------------------------------------------
# per-channel ops and thresholds
# ----------------------------------------------------------------------------


def _channel_axis(ndim: int) -> int:
    return 0 if ndim in (1, 3) else 1


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    if v.ndim == 0:
        return v
    shape = [1] * ndim
    shape[_channel_axis(ndim)] = v.shape[0]
    return v.reshape(shape)


def _reduce_to_channel(g: np.ndarray, vshape: tuple) -> np.ndarray:
    if len(vshape) == 0:
        return np.asarray(np.sum(g))
    axis = _channel_axis(g.ndim)
    other = tuple(i for i in range(g.ndim) if i != axis)
    return np.sum(g, axis=other)


def _check_channel(op: str, x: Tensor, v: Tensor) -> None:
    if v.ndim == 0:
        return
    if v.ndim != 1 or x.ndim == 0 or x.shape[_channel_axis(x.ndim)] != v.shape[0]:
        raise DimensionError(f"{op}: per-channel vector {v.shape} does not fit input {x.shape}")


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    x, s = _as_tensor(x), _as_tensor(s)
    _check_channel("channel_scale", x, s)
    sv = _channel_view(s.data, x.ndim)

    def back(g):
        gs = _reduce_to_channel(g * x.data, s.shape) if s.requires_grad else None
        return g * sv, gs

    return Tensor._result(x.data * sv, "channel_scale", (x, s), back)


class _KinkMonitor:
    def __init__(self):
        self.margin = np.inf


_MONITORS: list[_KinkMonitor] = []


@contextlib.contextmanager
def kink_monitor():
    """Record the smallest distance between any thresholded value and its threshold."""
    mon = _KinkMonitor()
    _MONITORS.append(mon)
    try:
        yield mon
    finally:
        _MONITORS.remove(mon)


def _note_margin(z: np.ndarray) -> None:
    if _MONITORS and z.size:
        m = float(np.min(np.abs(z)))
        for mon in _MONITORS:
            mon.margin = min(mon.margin, m)


def _threshold_operand(x: Tensor, lam, op: str) -> Tensor:
    lam = _as_tensor(lam)
    _check_channel(op, x, lam)
    if np.any(lam.data < 0):
        raise ValueError(f"{op}: threshold must be non-negative")
    return lam


def nonneg_soft_threshold(x: Tensor, lam) -> Tensor:
    """``max(x - lam, 0)`` with a per-channel (or scalar) threshold; ReLU with bias ``-lam``."""
    x = _as_tensor(x)
    lam = _threshold_operand(x, lam, "nonneg_soft_threshold")
    z = x.data - _channel_view(lam.data, x.ndim)
    _note_margin(z)
    active = z > 0
    out = np.where(active, z, 0.0)

    def back(g):
        gx = np.where(active, g, 0.0)
        gl = -_reduce_to_channel(gx, lam.shape) if lam.requires_grad else None
        return gx, gl

    return Tensor._result(out, "nonneg_soft_threshold", (x, lam), back)


def soft_threshold(x: Tensor, lam) -> Tensor:
    """Signed shrinkage ``sign(x) max(|x| - lam, 0)``; derivative is 0 on the closed dead zone."""
    x = _as_tensor(x)
    lam = _threshold_operand(x, lam, "soft_threshold")
    lv = _channel_view(lam.data, x.ndim)
    _note_margin(np.abs(x.data) - lv)
    upper = x.data > lv
    lower = x.data < -lv
    out = np.where(upper, x.data - lv, np.where(lower, x.data + lv, 0.0))

    def back(g):
        live = upper | lower
        gx = np.where(live, g, 0.0)
        gl = None
        if lam.requires_grad:
            gl = _reduce_to_channel(np.where(upper, -g, 0.0) + np.where(lower, g, 0.0), lam.shape)
        return gx, gl

    return Tensor._result(out, "soft_threshold", (x, lam), back)


# ----------------------------------------------------------------------------
# reductions and reshapes
# ----------------------------------------------------------------------------


def reduce_global_average_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean of ``(C, H, W)`` or ``(N, C, H, W)``."""
    x = _as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"global average pool needs (N?, C, H, W), got {x.shape}")
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))

    def back(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),)

    return Tensor._result(out, "global_avg_pool", (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return Tensor._result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def total(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return Tensor._result(np.asarray(np.sum(x.data)), "sum", (x,),
                          lambda g: (np.full(shape, float(g)),))


def sum_squares(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return Tensor._result(np.asarray(np.sum(x.data * x.data)), "sum_squares", (x,),
                          lambda g: (2.0 * float(g) * x.data,))


def dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("dot", a, b)
    return Tensor._result(np.asarray(np.sum(a.data * b.data)), "dot", (a, b),
                          lambda g: (float(g) * b.data, float(g) * a.data))


def channel_sum(x: Tensor) -> Tensor:
    """Sum over every axis except the channel axis, giving a ``(C,)`` vector."""
    x = _as_tensor(x)
    axis = _channel_axis(x.ndim)
    other = tuple(i for i in range(x.ndim) if i != axis)
    out = np.sum(x.data, axis=other)

    def back(g):
        return (np.broadcast_to(_channel_view(g, x.ndim), x.shape).copy(),)

    return Tensor._result(out, "channel_sum", (x,), back)


def inverse_sqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    """Elementwise ``1 / sqrt(x + eps)``."""
    x = _as_tensor(x)
    out = 1.0 / np.sqrt(x.data + eps)
    return Tensor._result(out, "inverse_sqrt", (x,), lambda g: (-0.5 * g * out ** 3,))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over a batch of logits ``(N, K)`` (or one ``(K,)`` row)."""
    logits = _as_tensor(logits)
    z = logits.data[None] if logits.ndim == 1 else logits.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.ndim != 2 or y.shape[0] != z.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {y.shape}")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ValueError(f"labels must lie in [0, {z.shape[1]})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    n = z.shape[0]
    rows = np.arange(n)
    loss = float(np.mean(logsum - shifted[rows, y]))

    def back(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, y] -= 1.0
        p *= float(g) / n
        return (p[0] if logits.ndim == 1 else p,)

    return Tensor._result(np.asarray(loss), "cross_entropy", (logits,), back)


# ----------------------------------------------------------------------------
# reverse sweep
# ----------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack = [(root, False)]
    while stack:
        node, finished = stack.pop()
        key = id(node)
        if finished:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError("cycle detected in differentiation graph")
        state[key] = 1
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and state.get(id(p)) != 2:
                if state.get(id(p)) == 1:
                    raise GraphError("cycle detected in differentiation graph")
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate gradients of a scalar ``root`` into every reachable trainable leaf.

    Leaf ``.grad`` attributes are overwritten with fresh totals, and the same
    mapping is returned (leaf tensor -> gradient array).
    """
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topological_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            leaves[node] = g
            node.grad = g
            continue
        for parent, gp in zip(node.parents, node._backward(g)):
            if gp is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + gp if key in pending else gp
    return leaves


def graph_fingerprint(root: Tensor) -> str:
    """Hash of the op sequence (and shapes) of the graph feeding ``root``."""
    h = hashlib.sha256()
    for node in _topological_order(root):
        h.update(f"{node.op}{node.shape};".encode())
    return h.hexdigest()


@dataclass
class GradCheck:
    max_rel_error: float
    skipped: list = field(default_factory=list)


def grad_check(f: Callable[[Tensor], Tensor], theta, h: float = 1e-5,
               coords: Sequence[int] | None = None) -> GradCheck:
    """Compare reverse-mode gradients of ``f`` at ``theta`` with central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Coordinates whose perturbed evaluations pass within ``10 h`` of a threshold
    kink are skipped and listed in the result.
    """
    base = np.array(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    grads = backward(out)
    analytic = grads.get(leaf, np.zeros_like(base)).reshape(-1)
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    skipped = []
    for i in idx:
        vals = []
        near_kink = False
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * h
            with kink_monitor() as mon:
                vals.append(float(f(Tensor(probe.reshape(base.shape))).data))
            near_kink |= mon.margin < 10 * h
        if near_kink:
            skipped.append(i)
            continue
        numeric = (vals[0] - vals[1]) / (2 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return GradCheck(worst, skipped)
