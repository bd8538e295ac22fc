import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from deep_pursuit.exceptions import TopologyError
from deep_pursuit.model import init_model
from deep_pursuit.network import dense_spec
from deep_pursuit.operators import NetworkOperators
from deep_pursuit.pursuit import (
    PursuitConfig,
    block_gradient,
    deep_pursuit,
    feed_forward,
    global_objective,
    ista_solve,
    layered_basis_pursuit,
    reconstruction_trace,
    run_pursuit,
)
from deep_pursuit.dictionary import assemble_global_dictionary
from deep_pursuit.tensor import Tensor, backward

from conftest import random_dense_net


def lasso_objective(B, x, lam, w):
    r = x - B @ w
    return 0.5 * float(r @ r) + float(np.sum(lam * np.abs(w)))


def fista_oracle(B, x, lam, iters=20000):
    """Accelerated projected proximal gradient in plain numpy."""
    L = np.linalg.norm(B, 2) ** 2
    w = z = np.zeros(B.shape[1])
    t = 1.0
    for _ in range(iters):
        w_next = np.maximum(z - (B.T @ (B @ z - x) + lam) / L, 0.0)
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = w_next + (t - 1) / t_next * (w_next - w)
        w, t = w_next, t_next
    return w


def bound_constrained_oracle(B, x, lam):
    """On w >= 0 the penalty is linear, so L-BFGS-B solves the problem exactly."""
    def f(w):
        r = B @ w - x
        return 0.5 * r @ r + lam @ w, B.T @ r + lam
    res = minimize(f, np.zeros(B.shape[1]), jac=True, method="L-BFGS-B",
                   bounds=[(0, None)] * B.shape[1], options={"ftol": 1e-15, "gtol": 1e-13, "maxiter": 10000})
    return res.x


def set_unit_steps(params):
    for layer in params.spec.layers:
        params.arrays[f"beta{layer.index}"] = np.asarray(1.0)


# ---------------------------------------------------------------- examples


def test_feed_forward_identity_example():
    params = init_model(dense_spec([2, 2]), 0)
    params.arrays["B1"] = np.eye(2)
    params.arrays["lam1"] = np.ones(2)
    state = feed_forward(np.array([3.0, 0.5]), params)
    assert np.array_equal(state.output.data, [2, 0])


def test_zero_input_gives_zero_codes(rng):
    spec, params = random_dense_net(rng, 3, with_skips=True)
    state = deep_pursuit(np.zeros(spec.input_shape), params, PursuitConfig(T=4))
    assert all(np.all(w.data == 0) for w in state.codes)


def test_skip_contribution_enters_preactivation():
    spec = dense_spec([2, 2, 2, 2], skips=[(1, 3, "identity")])
    params = init_model(spec, 0)
    for j in (1, 2, 3):
        params.arrays[f"B{j}"] = np.eye(2)
        params.arrays[f"lam{j}"] = np.zeros(2)
    x = np.array([1.0, 2.0])
    state = feed_forward(x, params)
    assert np.array_equal(state.w[3].data, state.w[2].data + state.w[1].data)


def test_ista_identity_dictionary():
    w = ista_solve(np.eye(2), [3.0, 0.5], 1.0, T=1, step=1.0)
    assert np.array_equal(w, [2, 0])
    assert np.array_equal(ista_solve(np.eye(2), [3.0, -0.5], 1.0, T=1, step=1.0), [2, 0])


def test_ista_orthonormal_least_squares(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    w_true = rng.random(4)
    w = ista_solve(Q, Q @ w_true, 0.0, T=200, step=1.0)
    assert np.allclose(w, Q.T @ (Q @ w_true), atol=1e-12)


def test_ista_rejects_bad_step():
    with pytest.raises(ValueError):
        ista_solve(np.eye(2), [1.0, 1.0], 0.1, T=1, step=0.0)


@pytest.mark.parametrize("seed", range(5))
def test_ista_reaches_oracle_objective(seed):
    rng = np.random.default_rng(seed)
    B, x, lam = rng.normal(size=(5, 8)), rng.normal(size=5), np.full(8, 0.1)
    w = ista_solve(B, x, lam, T=5000, step=1 / np.linalg.norm(B, 2) ** 2)
    oracle = fista_oracle(B, x, lam)
    assert lasso_objective(B, x, lam, w) - lasso_objective(B, x, lam, oracle) < 1e-8


def test_two_oracles_agree(rng):
    for _ in range(5):
        B, x, lam = rng.normal(size=(6, 10)), rng.normal(size=6), 0.05 * rng.random(10)
        a = lasso_objective(B, x, lam, fista_oracle(B, x, lam))
        b = lasso_objective(B, x, lam, bound_constrained_oracle(B, x, lam))
        assert abs(a - b) < 1e-9


# ---------------------------------------------------------------- mode reductions


@given(st.integers(0, 2**31 - 1), st.booleans())
def test_modes_agree_at_zero_iterations(seed, skips):
    rng = np.random.default_rng(seed)
    spec, params = random_dense_net(rng, with_skips=skips)
    x = rng.random((3,) + spec.input_shape)
    ref = feed_forward(x, params).output.data
    modes = ["ltp", "dp"] + ([] if spec.skips else ["lbp"])
    for mode in modes:
        assert np.array_equal(run_pursuit(x, params, PursuitConfig(T=0, mode=mode)).output.data, ref)


def test_layered_pursuit_rejects_skips(rng):
    spec, params = random_dense_net(rng, 3, with_skips=True)
    if not spec.skips:
        spec = dense_spec([3, 3, 3], skips=[(0, 2)])
        params = init_model(spec, 0)
    with pytest.raises(TopologyError):
        layered_basis_pursuit(np.ones(spec.input_shape), params, PursuitConfig(T=2, mode="lbp"))


def test_single_layer_modes_match_ista(rng):
    spec, params = random_dense_net(rng, 1)
    x = rng.random(spec.input_shape)
    set_unit_steps(params)
    B, lam = params["B1"], params["lam1"]
    step = 1 / NetworkOperators(params).lipschitz(1)
    w0 = feed_forward(x, params).output.data
    expected = ista_solve(B, x, lam, T=7, step=step, w0=w0)
    lbp = layered_basis_pursuit(x, params, PursuitConfig(T=7, mode="lbp")).output.data
    dp = deep_pursuit(x, params, PursuitConfig(T=7, mode="dp")).output.data
    assert np.array_equal(lbp, dp)
    assert np.allclose(dp, expected, atol=1e-14)


def test_single_layer_trajectory_matches_ista(rng):
    spec, params = random_dense_net(rng, 1)
    x = rng.random(spec.input_shape)
    step = 1 / NetworkOperators(params).lipschitz(1)
    w0 = feed_forward(x, params).output.data
    _, path = ista_solve(params["B1"], x, params["lam1"], T=6, step=step, w0=w0, trajectory=True)
    for t in range(7):
        assert np.array_equal(deep_pursuit(x, params, PursuitConfig(T=t)).output.data, path[t])


# ---------------------------------------------------------------- objectives


def test_global_objective_special_cases(rng):
    spec, params = random_dense_net(rng, 2)
    x = rng.normal(size=spec.input_shape)
    zeros = [Tensor(x)] + [Tensor(np.zeros(layer.out_shape)) for layer in spec.layers]
    assert np.isclose(float(global_objective(zeros, params).data), 0.5 * x @ x, rtol=1e-14)

    ident = init_model(dense_spec([3, 3, 3]), 0)
    for j in (1, 2):
        ident.arrays[f"B{j}"] = np.eye(3)
        ident.arrays[f"lam{j}"] = np.zeros(3)
    v = rng.random(3)
    assert float(global_objective([Tensor(v), Tensor(v), Tensor(v)], ident).data) == 0.0


@given(st.integers(0, 2**31 - 1), st.booleans())
def test_global_objective_matches_explicit_dictionary(seed, skips):
    rng = np.random.default_rng(seed)
    spec, params = random_dense_net(rng, with_skips=skips)
    x = rng.normal(size=spec.input_shape)
    codes = [rng.random(layer.out_shape) for layer in spec.layers]
    gd = assemble_global_dictionary(params)
    rhs = np.zeros(gd.shape[0])
    rhs[:x.size] = x
    for s in spec.skips:
        if s.source == 0:
            rows = slice(gd.row_offsets[s.target - 1], gd.row_offsets[s.target])
            rhs[rows] += x if s.kind == "identity" else params[f"S0_{s.target}"].T @ x
    r = rhs - gd.matrix @ np.concatenate(codes)
    penalty = sum(params[f"lam{j}"] @ codes[j - 1] for j in range(1, spec.n_layers + 1))
    expected = 0.5 * r @ r + penalty
    got = float(global_objective([Tensor(x)] + [Tensor(c) for c in codes], params).data)
    assert abs(got - expected) < 1e-10 * max(1.0, abs(expected))


@given(st.integers(0, 2**31 - 1), st.booleans())
def test_block_gradient_matches_autodiff(seed, skips):
    rng = np.random.default_rng(seed)
    spec, params = random_dense_net(rng, with_skips=skips)
    ops = NetworkOperators(params)
    w = [Tensor(rng.normal(size=spec.input_shape))]
    w += [Tensor(rng.normal(size=layer.out_shape), requires_grad=True) for layer in spec.layers]
    grads = backward(global_objective(w, ops=ops, smooth_only=True))
    for j in range(1, spec.n_layers + 1):
        hand = block_gradient(ops, [t.detach() for t in w], j).data
        assert np.allclose(hand, grads[w[j]], rtol=0, atol=1e-10 * max(1.0, np.abs(grads[w[j]]).max()))


@given(st.integers(0, 2**31 - 1), st.booleans())
def test_deep_pursuit_objective_non_increasing(seed, skips):
    rng = np.random.default_rng(seed)
    spec, params = random_dense_net(rng, with_skips=skips)
    set_unit_steps(params)
    x = rng.normal(size=(4,) + spec.input_shape)
    state = deep_pursuit(x, params, PursuitConfig(T=25, trace=True))
    trace = np.asarray(state.objective_trace)
    assert np.all(np.diff(trace) <= 1e-10 * np.maximum(1.0, np.abs(trace[:-1])))


@given(st.integers(0, 2**31 - 1))
def test_layered_pursuit_layer_objectives_non_increasing(seed):
    rng = np.random.default_rng(seed)
    spec, params = random_dense_net(rng, 2)
    set_unit_steps(params)
    x = rng.normal(size=(3,) + spec.input_shape)
    state = layered_basis_pursuit(x, params, PursuitConfig(T=20, mode="lbp", trace=True))
    per_layer = np.asarray(state.layer_objective_trace)
    assert np.all(np.diff(per_layer, axis=0) <= 1e-10 * np.maximum(1.0, np.abs(per_layer[:-1])))


def test_extrapolation_changes_iterates(rng):
    spec, params = random_dense_net(rng, 2)
    x = rng.random(spec.input_shape)
    plain = deep_pursuit(x, params, PursuitConfig(T=5)).output.data
    fast = deep_pursuit(x, params, PursuitConfig(T=5, alpha=0.5)).output.data
    assert not np.array_equal(plain, fast)
    with pytest.raises(ValueError):
        PursuitConfig(alpha=1.0)


# ---------------------------------------------------------------- traces


def test_trace_at_zero_iterations(rng):
    spec, params = random_dense_net(rng, 2)
    x = rng.random(spec.input_shape)
    state = run_pursuit(x, params, PursuitConfig(T=0, trace=True))
    trace = reconstruction_trace(state)
    assert trace.shape == (2, 1)
    ff = state.w
    r1 = np.linalg.norm(x - params["B1"] @ ff[1].data)
    assert np.isclose(trace[0, 0], r1, rtol=1e-14)


def test_trace_requires_tracing(rng):
    spec, params = random_dense_net(rng, 1)
    with pytest.raises(ValueError):
        reconstruction_trace(run_pursuit(np.ones(spec.input_shape), params, PursuitConfig(T=1)))


def test_residual_sum_non_increasing_for_chains(rng):
    for _ in range(10):
        spec, params = random_dense_net(rng, 2, lam_scale=0.0)
        set_unit_steps(params)
        x = rng.normal(size=spec.input_shape)
        state = deep_pursuit(x, params, PursuitConfig(T=15, trace=True))
        sq = np.asarray(state.residual_trace) ** 2
        assert np.all(np.diff(sq.sum(axis=1)) <= 1e-10)


def test_exact_fixed_point_has_zero_residuals():
    params = init_model(dense_spec([3, 3, 3]), 0)
    for j in (1, 2):
        params.arrays[f"B{j}"] = np.eye(3)
        params.arrays[f"lam{j}"] = np.zeros(3)
    state = deep_pursuit(np.array([0.2, 0.5, 1.0]), params, PursuitConfig(T=3, trace=True))
    assert np.all(reconstruction_trace(state) == 0)
