"""Inference algorithms: thresholding pursuit, layered basis pursuit, deep pursuit.

All three run on :class:`~deep_pursuit.tensor.Tensor` values, so the same code
serves plain inference (no graph is recorded) and differentiable unrolling
for training and attacks.

Every iterative update is a proximal gradient step on a non-negative LASSO
with step ``gamma_j = 1 / (beta_j L_j)``; the threshold applied after the
gradient step is ``gamma_j * lam_j`` so that the iterates descend the
penalized objective. The feed-forward initialization thresholds at ``lam_j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import ModelParams
from .operators import NetworkOperators
from .tensor import (
    Tensor,
    absolute,
    adjoint_map,
    channel_scale,
    channel_sum,
    dot,
    linear_map,
    mul,
    nonneg_soft_threshold,
    soft_threshold,
    sum_squares,
)

__all__ = [
    "PursuitConfig",
    "PursuitState",
    "soft_threshold",
    "nonneg_soft_threshold",
    "feed_forward",
    "ista_solve",
    "layered_basis_pursuit",
    "deep_pursuit",
    "run_pursuit",
    "block_gradient",
    "global_objective",
    "reconstruction_trace",
    "normalize_mode",
]

_MODE_ALIASES = {
    "ltp": "ltp", "l-tp": "ltp",
    "lbp": "lbp", "l-bp": "lbp",
    "dp": "dp", "dp-skip": "dp", "dp-res": "dp",
}


def normalize_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode.lower()]
    except KeyError:
        raise ValueError(f"unknown pursuit mode {mode!r}") from None


@dataclass
class PursuitConfig:
    T: int = 0
    mode: str = "dp"
    alpha: float | Sequence[float] = 0.0
    trace: bool = False

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        if self.T < 0:
            raise ValueError("iteration count T must be >= 0")
        alphas = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if np.any(alphas < 0) or np.any(alphas >= 1):
            raise ValueError("extrapolation weights must lie in [0, 1)")

    def alpha_for(self, j: int) -> float:
        if np.ndim(self.alpha) == 0:
            return float(self.alpha)
        return float(self.alpha[j - 1])


@dataclass
class PursuitState:
    """Codes of every layer plus optional per-iteration traces.

    ``w[0]`` is the input; ``w[j]`` holds layer ``j``'s codes after the last
    update and ``previous[j]`` the iterate before it. Traces store batch means
    of per-sample quantities, one column per iteration ``0..T``.
    """

    w: list
    previous: list
    mode: str
    T: int
    objective_trace: list = field(default_factory=list)
    residual_trace: list = field(default_factory=list)
    layer_objective_trace: list = field(default_factory=list)
    traced: bool = False

    @property
    def codes(self) -> list:
        return self.w[1:]

    @property
    def output(self) -> Tensor:
        return self.w[-1]


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _batch_size(x: Tensor, ops: NetworkOperators) -> int:
    return x.shape[0] if x.ndim == len(ops.spec.input_shape) + 1 else 1


def _per_sample_norms(r: np.ndarray, batched: bool) -> np.ndarray:
    if not batched:
        return np.array([np.linalg.norm(r)])
    return np.sqrt(np.sum(r.reshape(r.shape[0], -1) ** 2, axis=1))


def _ops_for(params: ModelParams, ops: NetworkOperators | None) -> NetworkOperators:
    return ops if ops is not None else NetworkOperators(params)


def _lam(ops: NetworkOperators, j: int) -> Tensor:
    return ops.threshold(j)


def _initial_codes(ops: NetworkOperators, j: int, target: Tensor) -> Tensor:
    z = ops._raw_analysis(j, target)
    if ops.bn:
        if ops.training and ops.scale[j] is None:
            s = ops.freeze_scale(j, z)
        else:
            s = ops._scale(j)
        z = channel_scale(z, s)
    return nonneg_soft_threshold(z, _lam(ops, j))


# ----------------------------------------------------------------------------
# objectives and gradients
# ----------------------------------------------------------------------------


def global_objective(state, params: ModelParams | None = None, ops: NetworkOperators | None = None,
                     smooth_only: bool = False) -> Tensor:
    """Sum over the batch of ``1/2 sum_j ||target_j - B_j w_j||^2 + sum_j lam_j^T |w_j|``.

    ``state`` is a :class:`PursuitState` or a list of codes with ``w[0] = x``.
    """
    ops = _ops_for(params, ops)
    w = state.w if isinstance(state, PursuitState) else state
    total = None
    for j in range(1, ops.spec.n_layers + 1):
        r = ops.target(j, w) - ops.synthesis(j, w[j])
        term = mul(sum_squares(r), 0.5)
        if not smooth_only:
            term = term + dot(_lam(ops, j), channel_sum(absolute(w[j])))
        total = term if total is None else total + term
    return total


def _layer_objective(ops, j, target, wj) -> float:
    r = target.data - ops.synthesis(j, wj).data
    lam = ops.threshold(j).data
    axis = 0 if wj.ndim in (1, 3) else 1
    shape = [1] * wj.ndim
    shape[axis] = lam.shape[0]
    return 0.5 * float(np.sum(r * r)) + float(np.sum(lam.reshape(shape) * np.abs(wj.data)))


def block_gradient(ops: NetworkOperators, w: list, j: int, w_j: Tensor | None = None,
                   recon: dict | None = None) -> Tensor:
    """Gradient of the smooth global objective with respect to block ``j``.

    Evaluated at ``w`` with block ``j`` replaced by ``w_j`` (the extrapolated
    point). Own reconstruction term first, then feedback from every layer that
    block ``j`` feeds. ``recon`` optionally caches ``synthesis(m, w[m])`` per
    layer; missing entries are filled in.
    """
    cur = list(w)
    if w_j is not None:
        cur[j] = w_j

    def synth(m):
        if recon is None or cur[m] is not w[m]:
            return ops.synthesis(m, cur[m])
        if recon.get(m) is None:
            recon[m] = ops.synthesis(m, w[m])
        return recon[m]

    g = ops.analysis(j, synth(j) - ops.target(j, cur))
    for m, _ in ops.spec.outgoing(j):
        r = ops.target(m, cur) - synth(m)
        g = g + ops.edge_adjoint(j, m, r)
    return g


def _record(state: PursuitState, ops: NetworkOperators, targets: list | None = None) -> None:
    w = state.w
    batched = w[0].ndim == len(ops.spec.input_shape) + 1
    n = _batch_size(w[0], ops)
    residuals, layer_obj = [], []
    for j in range(1, ops.spec.n_layers + 1):
        target = targets[j] if targets is not None else ops.target(j, w)
        r = target.data - ops.synthesis(j, w[j]).data
        residuals.append(float(np.mean(_per_sample_norms(r, batched))))
        layer_obj.append(_layer_objective(ops, j, target, w[j]) / n)
    state.residual_trace.append(residuals)
    state.layer_objective_trace.append(layer_obj)
    state.objective_trace.append(float(global_objective(w, ops=ops).data) / n)


# ----------------------------------------------------------------------------
# algorithms
# ----------------------------------------------------------------------------


def feed_forward(x, params: ModelParams | None = None, ops: NetworkOperators | None = None,
                 trace: bool = False) -> PursuitState:
    """Layered thresholding pursuit: ``w_j = relu(B_j^T target_j - lam_j)`` in layer order."""
    ops = _ops_for(params, ops)
    x = _as_input(x)
    w = [x]
    for j in range(1, ops.spec.n_layers + 1):
        w.append(_initial_codes(ops, j, ops.target(j, w)))
    state = PursuitState(w, list(w), "ltp", 0, traced=trace)
    if trace:
        _record(state, ops)
    return state


def ista_solve(B, x, lam, T: int, step: float, nonneg: bool = True, w0=None,
               trajectory: bool = False):
    """Proximal gradient (ISTA) on ``1/2 ||x - B w||^2 + lam ||w||_1``.

    ``lam`` is a scalar or one threshold per atom. Starts from ``w0`` (zeros by
    default). With ``trajectory`` the list of all iterates is returned as well.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    B = B if isinstance(B, Tensor) else Tensor(B)
    x = _as_input(x)
    lam_t = lam if isinstance(lam, Tensor) else Tensor(lam)
    prox = nonneg_soft_threshold if nonneg else soft_threshold
    thr = mul(lam_t, step)
    w = Tensor(np.zeros(x.shape[:-1] + (B.shape[1],))) if w0 is None else _as_input(w0)
    path = [w.data]
    for _ in range(T):
        g = adjoint_map(B, linear_map(B, w) - x)
        w = prox(w - mul(g, step), thr)
        if trajectory:
            path.append(w.data)
    if trajectory:
        return w.data, path
    return w.data


def layered_basis_pursuit(x, params: ModelParams | None = None, config: PursuitConfig | None = None,
                          ops: NetworkOperators | None = None) -> PursuitState:
    """Cascade of per-layer non-negative ISTA solves, each warm-started by thresholding.

    Layer ``j`` reconstructs the final iterate of layer ``j - 1`` with step
    ``1 / (beta_j L_j)`` where ``L_j`` is the layer's own Lipschitz constant.
    """
    config = config or PursuitConfig(mode="lbp")
    ops = _ops_for(params, ops)
    ops.require_chain()
    x = _as_input(x)
    n = _batch_size(x, ops)
    batched = x.ndim == len(ops.spec.input_shape) + 1
    w = [x]
    previous = [x]
    history = []
    residuals = []
    layer_obj = []
    for j in range(1, ops.spec.n_layers + 1):
        target = w[j - 1]
        wj = _initial_codes(ops, j, target)
        prev = wj
        iterates = [wj]
        if config.T:
            gamma = ops.step(j, local=True)
            thr = mul(gamma, _lam(ops, j))
            for _ in range(config.T):
                g = ops.analysis(j, ops.synthesis(j, wj) - target)
                prev, wj = wj, nonneg_soft_threshold(wj - gamma * g, thr)
                if config.trace:
                    iterates.append(wj)
        w.append(wj)
        previous.append(prev)
        if config.trace:
            history.append(iterates)
            res_j, obj_j = [], []
            for it in iterates:
                r = target.data - ops.synthesis(j, it).data
                res_j.append(float(np.mean(_per_sample_norms(r, batched))))
                obj_j.append(_layer_objective(ops, j, target, it) / n)
            residuals.append(res_j)
            layer_obj.append(obj_j)
    state = PursuitState(w, previous, "lbp", config.T, traced=config.trace)
    if config.trace:
        state.residual_trace = [list(col) for col in zip(*residuals)]
        state.layer_objective_trace = [list(col) for col in zip(*layer_obj)]
        for t in range(config.T + 1):
            snapshot = [x] + [history[j][t] for j in range(ops.spec.n_layers)]
            state.objective_trace.append(float(global_objective(snapshot, ops=ops).data) / n)
    return state


def deep_pursuit(x, params: ModelParams | None = None, config: PursuitConfig | None = None,
                 ops: NetworkOperators | None = None) -> PursuitState:
    """Block coordinate descent on the global non-negative LASSO.

    Starts from the feed-forward codes; each of the ``T`` sweeps updates layers
    ``1..l`` in order, so block ``j`` sees fresh codes for ``k < j`` and the
    previous sweep's codes for ``k > j``. With ``alpha_j > 0`` the step is taken
    from ``w_j + alpha_j (w_j - w_j_prev)``.
    """
    config = config or PursuitConfig(mode="dp")
    ops = _ops_for(params, ops)
    state = feed_forward(x, ops=ops, trace=config.trace)
    state.mode, state.T = "dp", config.T
    if config.T == 0:
        return state
    w = state.w
    prev = state.previous
    l = ops.spec.n_layers
    steps = [None] + [ops.step(j) for j in range(1, l + 1)]
    thr = [None] + [mul(steps[j], _lam(ops, j)) for j in range(1, l + 1)]
    recon: dict = {}
    for _ in range(config.T):
        for j in range(1, l + 1):
            a = config.alpha_for(j)
            w_hat = w[j] if a == 0.0 else w[j] + (w[j] - prev[j]) * a
            g = block_gradient(ops, w, j, w_hat, recon)
            prev[j] = w[j]
            w[j] = nonneg_soft_threshold(w_hat - steps[j] * g, thr[j])
            recon[j] = None
        if config.trace:
            _record(state, ops)
    return state


def run_pursuit(x, params: ModelParams | None = None, config: PursuitConfig | None = None,
                ops: NetworkOperators | None = None) -> PursuitState:
    config = config or PursuitConfig()
    if config.mode == "ltp" or config.T == 0:
        if config.mode == "lbp":
            _ops_for(params, ops).require_chain()
        state = feed_forward(x, params, ops, trace=config.trace)
        state.mode = config.mode
        return state
    if config.mode == "lbp":
        return layered_basis_pursuit(x, params, config, ops)
    return deep_pursuit(x, params, config, ops)


def reconstruction_trace(state: PursuitState) -> np.ndarray:
    """Per-layer residual norms, shape ``(layers, T + 1)``."""
    if not state.traced:
        raise ValueError("pursuit was run without tracing")
    return np.asarray(state.residual_trace, dtype=float).T
