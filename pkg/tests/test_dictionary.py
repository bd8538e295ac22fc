import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deep_pursuit.dictionary import (
    assemble_global_dictionary,
    dictionary_metrics,
    frame_potential,
    lipschitz_constant,
    materialize_operator,
    mutual_coherence,
    welch_bound,
)
from deep_pursuit.exceptions import DimensionError, TopologyError
from deep_pursuit.model import init_model
from deep_pursuit.network import LayerSpec, NetworkSpec, conv_pyramid_spec, dense_spec, validate_spec
from deep_pursuit.tensor import Tensor, conv2d

from conftest import random_dense_net


def brute_coherence(D):
    Dn = D / np.linalg.norm(D, axis=0)
    n = Dn.shape[1]
    return max(abs(float(Dn[:, i] @ Dn[:, j])) for i in range(n) for j in range(n) if i != j)


def brute_frame_potential(D):
    Dn = D / np.linalg.norm(D, axis=0)
    n = Dn.shape[1]
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                total += abs(float(Dn[:, i] @ Dn[:, j]))
    return total / (n * (n - 1))


# ---------------------------------------------------------------- topology


def test_chain_spec_valid():
    spec = dense_spec([2, 3, 2])
    assert spec.n_layers == 2 and spec.n_features == 2


def test_identity_skip_dimension_mismatch():
    with pytest.raises(DimensionError):
        dense_spec([3, 4, 5, 6], skips=[(0, 2, "identity")])


@pytest.mark.parametrize("skip", [(0, 1), (1, 5), (2, 1)])
def test_invalid_skip_endpoints(skip):
    with pytest.raises(TopologyError):
        dense_spec([3, 3, 3, 3], skips=[skip])


def test_duplicate_skip_rejected():
    with pytest.raises(TopologyError):
        dense_spec([3, 3, 3], skips=[(0, 2), (0, 2)])


def test_layer_shape_chain_checked():
    bad = NetworkSpec((3,), (LayerSpec(1, "dense", (3,), (4,)), LayerSpec(2, "dense", (5,), (2,))), (), 2)
    with pytest.raises(DimensionError):
        validate_spec(bad)


def test_conv_pyramid_layout():
    spec = conv_pyramid_spec(4, 1)
    assert spec.n_layers == 6
    assert [layer.channels for layer in spec.layers] == [4, 4, 8, 8, 16, 16]
    assert [layer.stride for layer in spec.layers] == [1, 1, 2, 1, 2, 1]
    assert spec.layers[-1].out_shape == (16, 8, 8)
    res = conv_pyramid_spec(4, 2, residual=True, input_shape=(3, 8, 8))
    assert res.n_layers == 12
    assert all(s.target == s.source + 2 for s in res.skips)
    assert {s.kind for s in res.skips} == {"identity", "projection"}


def test_spec_hash_depends_on_topology():
    a = dense_spec([3, 3, 3])
    b = dense_spec([3, 3, 3], skips=[(0, 2)])
    assert a.hash() != b.hash() and a.hash() == dense_spec([3, 3, 3]).hash()


# ---------------------------------------------------------------- initialization


def test_init_is_deterministic():
    spec = conv_pyramid_spec(2, 1, input_shape=(3, 4, 4))
    assert init_model(spec, 7, "bn").equal(init_model(spec, 7, "bn"))
    assert not init_model(spec, 7).equal(init_model(spec, 8))


def test_init_constraints():
    params = init_model(dense_spec([5, 4, 3]), 0)
    for j in (1, 2):
        assert np.all(params[f"lam{j}"] == 0.01)
        assert float(params[f"beta{j}"]) == 1.0


def test_init_column_norm_band():
    norms = []
    for seed in range(100):
        B = init_model(dense_spec([100, 20]), seed)["B1"]
        norms.append(np.linalg.norm(B, axis=0))
    norms = np.concatenate(norms)
    assert norms.min() > 0.05 and norms.max() < 0.5


# ---------------------------------------------------------------- explicit operators


def test_global_dictionary_chain_layout(rng):
    spec = dense_spec([2, 3, 2])
    params = init_model(spec, 1)
    gd = assemble_global_dictionary(params)
    assert gd.shape == (5, 5)
    assert np.array_equal(gd.block(1, 1), params["B1"])
    assert np.array_equal(gd.block(2, 1), -np.eye(3))
    assert np.array_equal(gd.block(2, 2), params["B2"])
    assert np.all(gd.block(1, 2) == 0)


def test_global_dictionary_skip_blocks_below_diagonal(rng):
    spec = dense_spec([3, 3, 4, 3], skips=[(1, 3, "dense")])
    params = init_model(spec, 2)
    gd = assemble_global_dictionary(params)
    assert np.allclose(gd.block(3, 1), -params["S1_3"].T)
    for row in range(1, 4):
        for col in range(row + 1, 4):
            assert np.all(gd.block(row, col) == 0)


def test_global_dictionary_single_layer(rng):
    params = init_model(dense_spec([4, 6]), 0)
    assert np.array_equal(assemble_global_dictionary(params).matrix, params["B1"])


def test_materialize_1x1_and_delta_kernels():
    spec = NetworkSpec((1, 3, 3), (LayerSpec(1, "conv", (1, 3, 3), (1, 3, 3), 1, 1),), (), 2)
    params = init_model(spec, 0)
    params.arrays["B1"] = np.full((1, 1, 1, 1), 2.5)
    assert np.allclose(materialize_operator(1, params), 2.5 * np.eye(9), atol=0)
    spec3 = NetworkSpec((1, 3, 3), (LayerSpec(1, "conv", (1, 3, 3), (1, 3, 3), 1, 3),), (), 2)
    params3 = init_model(spec3, 0)
    delta = np.zeros((1, 1, 3, 3))
    delta[0, 0, 1, 1] = 1.0
    params3.arrays["B1"] = delta
    assert np.array_equal(materialize_operator(1, params3), np.eye(9))


def test_materialized_conv_matches_direct_convolution(rng):
    spec = NetworkSpec((1, 4, 4), (LayerSpec(1, "conv", (1, 4, 4), (2, 4, 4), 1, 3),), (), 2)
    params = init_model(spec, 0)
    params.arrays["B1"] = rng.normal(size=(2, 1, 3, 3))
    M = materialize_operator(1, params)
    x = rng.normal(size=(1, 4, 4))
    direct = conv2d(Tensor(params["B1"]), Tensor(x)).data
    assert np.allclose(M.T @ x.reshape(-1), direct.reshape(-1), atol=1e-12)


# ---------------------------------------------------------------- coherence metrics


def test_coherence_examples():
    assert mutual_coherence(np.eye(3)) == 0.0
    D = np.array([[1.0, 1 / math.sqrt(2)], [0.0, 1 / math.sqrt(2)]])
    assert math.isclose(mutual_coherence(D), 1 / math.sqrt(2), rel_tol=1e-12)
    assert math.isclose(mutual_coherence(np.array([[1.0, 2.0], [1.0, 2.0]])), 1.0, rel_tol=1e-12)


def test_frame_potential_examples(rng):
    assert frame_potential(np.eye(4)) == 0.0
    assert math.isclose(frame_potential(np.ones((3, 5)) / math.sqrt(3)), 1.0, rel_tol=1e-12)
    D = rng.normal(size=(8, 16))
    assert abs(frame_potential(D) - brute_frame_potential(D)) < 1e-12


def test_welch_bound_examples():
    assert welch_bound(4, 4) == 0.0
    assert math.isclose(welch_bound(2, 4), math.sqrt(2 / 6), rel_tol=1e-15)
    with pytest.raises(ValueError):
        welch_bound(3, 1)


def test_zero_columns_are_dropped_with_warning():
    D = np.array([[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    with pytest.warns(RuntimeWarning):
        assert math.isclose(mutual_coherence(D), 1 / math.sqrt(2), rel_tol=1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.integers(2, 14))
def test_metrics_match_brute_force(seed, m, n):
    D = np.random.default_rng(seed).normal(size=(m, n))
    assert abs(mutual_coherence(D) - brute_coherence(D)) < 1e-12
    assert abs(frame_potential(D) - brute_frame_potential(D)) < 1e-12


@given(st.integers(0, 2**31 - 1))
def test_coherence_above_welch_bound(seed):
    D = np.random.default_rng(seed).normal(size=(4, 12))
    D /= np.linalg.norm(D, axis=0)
    assert mutual_coherence(D) >= welch_bound(4, 12)


def test_identity_skips_do_not_raise_welch_bound():
    for width, depth in itertools.product((3, 4), (1, 2)):
        spec = conv_pyramid_spec(width, depth, input_shape=(3, 4, 4))
        res = conv_pyramid_spec(width, depth, residual=True, input_shape=(3, 4, 4))
        rows = sum(layer.in_size for layer in spec.layers)
        cols = sum(layer.out_size for layer in spec.layers)
        chain = assemble_global_dictionary(init_model(spec, 0)).shape
        skip = assemble_global_dictionary(init_model(res, 0)).shape
        assert chain == skip == (rows, cols)
        assert welch_bound(*skip) <= welch_bound(*chain)


def test_dictionary_metrics_keys(rng):
    spec, params = random_dense_net(rng, 2, with_skips=True)
    m = dictionary_metrics(params)
    assert set(m) == {"coherence", "frame_potential", "welch_bound"}
    assert 0 <= m["frame_potential"] <= m["coherence"] <= 1


# ---------------------------------------------------------------- Lipschitz constants


def test_lipschitz_examples(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    params = init_model(dense_spec([5, 5]), 0)
    params.arrays["B1"] = Q
    assert math.isclose(lipschitz_constant(1, params), 1.0, rel_tol=1e-9)
    params.arrays["B1"] = 2 * np.eye(5)
    assert math.isclose(lipschitz_constant(1, params), 4.0, rel_tol=1e-12)


def test_lipschitz_matches_svd(rng):
    params = init_model(dense_spec([6, 10]), 0)
    params.arrays["B1"] = rng.normal(size=(6, 10))
    sigma = np.linalg.svd(params["B1"], compute_uv=False)[0]
    assert abs(lipschitz_constant(1, params) - sigma**2) < 1e-6 * sigma**2


def test_lipschitz_adds_outgoing_edges(rng):
    spec, params = random_dense_net(rng, 3)
    sigma = np.linalg.svd(params["B1"], compute_uv=False)[0]
    assert abs(lipschitz_constant(1, params) - (sigma**2 + 1.0)) < 1e-6 * (sigma**2 + 1)
    assert abs(lipschitz_constant(1, params, local=True) - sigma**2) < 1e-6 * sigma**2
