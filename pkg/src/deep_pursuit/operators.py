"""Implicit application of every block of the structured dictionary.

A :class:`NetworkOperators` instance binds one parameter snapshot (as tensors,
possibly trainable) and exposes the per-layer analysis ``B_j^T``, synthesis
``B_j``, and skip-edge maps used by all pursuit algorithms, plus cached step
sizes derived from power-iteration Lipschitz estimates.

In ``bn`` mode each dictionary is column-scaled by a frozen per-channel factor
``scale_j / sqrt(var_j + eps)`` and the mean shift enters the threshold; the
statistics come from the batch during training (taken at the feed-forward
pass) and from running averages otherwise.
"""

from __future__ import annotations

import numpy as np

from .exceptions import TopologyError
from .model import ModelParams
from .network import embed_stride
from .tensor import (
    Tensor,
    add,
    adjoint_map,
    channel_scale,
    channel_sum,
    conv2d,
    conv_matrix,
    conv_transpose2d,
    embed,
    embed_adjoint,
    inverse_sqrt,
    linear_map,
    mul,
    nonneg_soft_threshold,
    reciprocal,
    reshape,
    sub,
    sum_squares,
)

DENSE_CONV_ENTRIES = 1 << 20
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
POWER_ITERS = 500
POWER_TOL = 1e-10


def power_iteration(apply_gram, shape, max_iter: int = POWER_ITERS, tol: float = POWER_TOL, start=None):
    """Largest eigenvalue of a PSD operator and its unit eigenvector.

    Starts from ``start`` when given (warm start), else from the normalized
    all-ones vector. Returns ``(estimate, converged, vector)``; convergence
    means the Rayleigh quotient changed by less than ``tol`` relative between
    sweeps.
    """
    v = np.ones(shape) if start is None else np.array(start, dtype=float)
    v /= np.linalg.norm(v)
    prev = None
    est = 0.0
    for _ in range(max_iter):
        w = apply_gram(v)
        est = float(np.vdot(v, w))
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            return 0.0, True, v
        v = w / nrm
        if prev is not None and abs(est - prev) <= tol * abs(est):
            return est, True, v
        prev = est
    return est, False, v


def top_right_singular_vector(M: np.ndarray) -> np.ndarray:
    """Unit vector ``v`` maximizing ``||M v||``, from the smaller Gram matrix."""
    if M.shape[0] < M.shape[1]:
        _, U = np.linalg.eigh(M @ M.T)
        v = M.T @ U[:, -1]
    else:
        _, V = np.linalg.eigh(M.T @ M)
        v = V[:, -1]
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.ones_like(v) / np.sqrt(v.size)


class NetworkOperators:
    def __init__(self, params: ModelParams, tensors: dict | None = None, training: bool = False,
                 dense_conv: bool | None = None):
        self.params = params
        self.spec = params.spec
        self.t = tensors if tensors is not None else params.tensors()
        self.c = {k: v.detach() for k, v in self.t.items()}
        self.training = training
        self.bn = params.norm == "bn"
        self.scale: list = [None] * (self.spec.n_layers + 1)
        self.mean: list = [None] * (self.spec.n_layers + 1)
        self._thresholds: list = [None] * (self.spec.n_layers + 1)
        self._lipschitz: dict = {}
        self._norms: dict = {}
        self._steps: dict = {}
        self.converged = True
        # small conv layers run as cached explicit matrices; None picks by size
        self.dense_conv = dense_conv
        self._matrices: dict = {}

    # ------------------------------------------------------------------
    # dictionary blocks
    # ------------------------------------------------------------------

    def _matrix(self, j: int, store) -> Tensor | None:
        layer = self.spec.layer(j)
        if self.dense_conv is False or (self.dense_conv is None
                                        and layer.in_size * layer.out_size > DENSE_CONV_ENTRIES):
            return None
        key = (j, store is self.c)
        if key not in self._matrices:
            self._matrices[key] = conv_matrix(store[f"B{j}"], tuple(layer.in_shape), layer.stride)
        return self._matrices[key]

    @staticmethod
    def _through_matrix(apply, M: Tensor, x: Tensor, size: int, out_shape: tuple) -> Tensor:
        batched = x.ndim == len(out_shape) + 1
        flat = reshape(x, (x.shape[0], size) if batched else (size,))
        y = apply(M, flat)
        return reshape(y, ((x.shape[0],) if batched else ()) + tuple(out_shape))

    def _raw_analysis(self, j: int, u: Tensor, store=None) -> Tensor:
        store = self.t if store is None else store
        layer = self.spec.layer(j)
        B = store[f"B{j}"]
        if layer.kind == "dense":
            return adjoint_map(B, u)
        M = self._matrix(j, store)
        if M is not None:
            return self._through_matrix(adjoint_map, M, u, layer.in_size, layer.out_shape)
        return conv2d(B, u, layer.stride)

    def _raw_synthesis(self, j: int, w: Tensor, store=None) -> Tensor:
        store = self.t if store is None else store
        layer = self.spec.layer(j)
        B = store[f"B{j}"]
        if layer.kind == "dense":
            return linear_map(B, w)
        M = self._matrix(j, store)
        if M is not None:
            return self._through_matrix(linear_map, M, w, layer.out_size, layer.in_shape)
        return conv_transpose2d(B, w, layer.stride, tuple(layer.in_shape[1:]))

    def freeze_scale(self, j: int, preactivation: Tensor | None = None) -> Tensor:
        """Fix layer ``j``'s normalization for the rest of this pass.

        Uses batch statistics of the feed-forward pre-activation while training
        (differentiated like ordinary batch normalization) and running
        averages otherwise. Later iterations reuse the same factors.
        """
        if self.scale[j] is not None:
            raise RuntimeError(f"normalization of layer {j} is already frozen for this pass")
        if self.training:
            count = preactivation.size // preactivation.shape[0 if preactivation.ndim in (1, 3) else 1]
            mean = mul(channel_sum(preactivation), 1.0 / count)
            var = sub(mul(channel_sum(mul(preactivation, preactivation)), 1.0 / count), mul(mean, mean))
            for key, value in ((f"running_mean{j}", mean.data), (f"running_var{j}", var.data)):
                self.params.arrays[key] = (1 - BN_MOMENTUM) * self.params.arrays[key] + BN_MOMENTUM * value
            inv = inverse_sqrt(var, BN_EPS)
        else:
            mean = Tensor(self.params.arrays[f"running_mean{j}"])
            inv = Tensor(1.0 / np.sqrt(self.params.arrays[f"running_var{j}"] + BN_EPS))
        self.scale[j] = mul(self.t[f"scale{j}"], inv)
        self.mean[j] = mean
        return self.scale[j]

    def threshold(self, j: int) -> Tensor:
        """Per-channel penalty of layer ``j``.

        In ``bn`` mode the normalization shift is folded in:
        ``max(lam + scale * mean - offset, 0)``, which keeps the penalty
        non-negative and the per-pass problem convex.
        """
        if not self.bn:
            return self.t[f"lam{j}"]
        if self._thresholds[j] is None:
            s = self._scale(j)
            shift = sub(mul(s, self.mean[j]), self.t[f"offset{j}"])
            self._thresholds[j] = nonneg_soft_threshold(add(self.t[f"lam{j}"], shift), 0.0)
        return self._thresholds[j]

    def _scale(self, j: int):
        if not self.bn:
            return None
        if self.scale[j] is None:
            if self.training:
                raise RuntimeError(f"layer {j} used before its normalization was frozen")
            self.freeze_scale(j)
        return self.scale[j]

    def analysis(self, j: int, u: Tensor) -> Tensor:
        z = self._raw_analysis(j, u)
        s = self._scale(j)
        return z if s is None else channel_scale(z, s)

    def synthesis(self, j: int, w: Tensor) -> Tensor:
        s = self._scale(j)
        return self._raw_synthesis(j, w if s is None else channel_scale(w, s))

    def edge_forward(self, n: int, m: int, w: Tensor, store=None) -> Tensor:
        """Contribution ``B_mn^T w_n`` of layer ``n``'s codes to layer ``m``'s target."""
        if n == m - 1:
            return w
        store = self.t if store is None else store
        kind = self.spec.skip(n, m).kind
        if kind == "identity":
            return w
        if kind == "projection":
            dst = tuple(self.spec.layer(m).in_shape)
            return embed(w, dst[0], embed_stride(self.spec.shape_of(n), dst))
        return adjoint_map(store[f"S{n}_{m}"], w)

    def edge_adjoint(self, n: int, m: int, r: Tensor, store=None) -> Tensor:
        """Adjoint ``B_mn r`` mapping a residual of layer ``m`` back to layer ``n``."""
        if n == m - 1:
            return r
        store = self.t if store is None else store
        kind = self.spec.skip(n, m).kind
        if kind == "identity":
            return r
        if kind == "projection":
            src = self.spec.shape_of(n)
            stride = embed_stride(src, tuple(self.spec.layer(m).in_shape))
            return embed_adjoint(r, src[0], stride, tuple(src[1:]))
        return linear_map(store[f"S{n}_{m}"], r)

    def target(self, m: int, w: list) -> Tensor:
        """Reconstruction target of layer ``m``: sum of all incoming edge contributions."""
        out = None
        for n, _ in self.spec.incoming(m):
            term = self.edge_forward(n, m, w[n])
            out = term if out is None else out + term
        return out

    def require_chain(self) -> None:
        if self.spec.skips:
            raise TopologyError("layered basis pursuit supports chain networks only; "
                                "local iterations cannot account for skip connections")

    # ------------------------------------------------------------------
    # Lipschitz constants and steps
    # ------------------------------------------------------------------

    def _explicit_operator(self, j: int) -> np.ndarray | None:
        """Scaled synthesis matrix of layer ``j`` when small enough to form, else None."""
        layer = self.spec.layer(j)
        if layer.kind == "dense":
            M = self.c[f"B{j}"].data
        elif layer.in_size * layer.out_size <= DENSE_CONV_ENTRIES:
            M = conv_matrix(self.c[f"B{j}"], tuple(layer.in_shape), layer.stride).data
        else:
            return None
        s = self._scale(j)
        if s is not None:
            M = M * np.repeat(s.data, layer.out_size // layer.channels)[None, :]
        return M

    def dictionary_norm_sq(self, j: int) -> Tensor:
        """``sigma_max(B_j)^2`` of the (normalization-scaled) dictionary.

        Evaluated as ``||B_j v||^2`` at the leading right singular vector ``v``
        (held fixed), which makes the value differentiable in the dictionary
        and the scale with the exact gradient.
        """
        if j not in self._norms:
            M = self._explicit_operator(j)
            if M is not None:
                v = top_right_singular_vector(M).reshape(self.spec.layer(j).out_shape)
            else:
                v = self._power_vector(j)
            self._norms[j] = sum_squares(self.synthesis(j, Tensor(v)))
        return self._norms[j]

    def _power_vector(self, j: int) -> np.ndarray:
        s = self._scale(j)
        sd = None if s is None else s.detach()

        def gram(v):
            vt = Tensor(v)
            if sd is not None:
                vt = channel_scale(vt, sd)
            u = self._raw_analysis(j, self._raw_synthesis(j, vt, self.c), self.c)
            if sd is not None:
                u = channel_scale(u, sd)
            return u.data

        _, ok, v = power_iteration(gram, self.spec.layer(j).out_shape)
        self.converged &= ok
        return v

    def edge_norm_sq(self, n: int, m: int) -> Tensor | float:
        if n == m - 1 or self.spec.skip(n, m).kind != "dense":
            return 1.0
        v = top_right_singular_vector(self.c[f"S{n}_{m}"].data.T)
        return sum_squares(self.edge_forward(n, m, Tensor(v)))

    def lipschitz_tensor(self, j: int, local: bool = False) -> Tensor:
        """Block Lipschitz constant of the smooth objective with respect to layer ``j``.

        ``local`` keeps only the layer's own reconstruction term (layered pursuit);
        otherwise every outgoing edge adds its squared operator norm.
        """
        key = (j, local)
        if key not in self._lipschitz:
            value = self.dictionary_norm_sq(j)
            if not local:
                for m, _ in self.spec.outgoing(j):
                    value = value + self.edge_norm_sq(j, m)
            self._lipschitz[key] = value
        return self._lipschitz[key]

    def lipschitz(self, j: int, local: bool = False) -> float:
        return float(self.lipschitz_tensor(j, local).data)

    def step(self, j: int, local: bool = False) -> Tensor:
        """``1 / (beta_j L_j)`` as a tensor, differentiable in ``beta_j`` and through ``L_j``."""
        key = (j, local)
        if key not in self._steps:
            self._steps[key] = reciprocal(mul(self.t[f"beta{j}"], self.lipschitz_tensor(j, local)))
        return self._steps[key]
