"""Explicit structured dictionaries and the metrics computed on them.

The global dictionary stacks every layer's synthesis operator on the block
diagonal. Chain edges contribute ``-I`` on the first subdiagonal, and a skip
``n -> m`` contributes ``-B_mn^T`` at block row ``m``, block column ``n``. Rows
are grouped by layer input spaces ``d_0 .. d_{l-1}``; columns by code spaces
``d_1 .. d_l``. Skips leaving the input itself only change the target vector,
not the matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import OperatorTooLargeError
from .model import ModelParams
from .network import LayerSpec
from .operators import NetworkOperators
from .tensor import Tensor

MAX_ENTRIES = 10_000_000


def _guard(rows: int, cols: int) -> None:
    if rows * cols > MAX_ENTRIES:
        raise OperatorTooLargeError(
            f"explicit {rows}x{cols} matrix exceeds {MAX_ENTRIES} entries; "
            "metrics unavailable, implicit pursuit is unaffected")


def _ops(params: ModelParams, ops: NetworkOperators | None) -> NetworkOperators:
    return ops if ops is not None else NetworkOperators(params)


def _basis_images(apply, shape: tuple) -> np.ndarray:
    size = int(np.prod(shape))
    basis = Tensor(np.eye(size).reshape((size,) + tuple(shape)))
    out = apply(basis).data
    return out.reshape(size, -1).T


def materialize_operator(layer: LayerSpec | int, params: ModelParams,
                         ops: NetworkOperators | None = None) -> np.ndarray:
    """Explicit matrix ``M`` with ``M @ vec(w) == vec(B_j w)`` for layer ``j``."""
    ops = _ops(params, ops)
    layer = layer if isinstance(layer, LayerSpec) else ops.spec.layer(layer)
    _guard(layer.in_size, layer.out_size)
    return _basis_images(lambda w: ops.synthesis(layer.index, w), layer.out_shape)


def materialize_edge(source: int, target: int, params: ModelParams,
                     ops: NetworkOperators | None = None) -> np.ndarray:
    """Explicit ``B_mn^T``: how layer ``source``'s codes enter layer ``target``'s input."""
    ops = _ops(params, ops)
    src = ops.spec.shape_of(source)
    dst_size = ops.spec.layer(target).in_size
    _guard(dst_size, int(np.prod(src)))
    return _basis_images(lambda w: ops.edge_forward(source, target, w), src)


@dataclass
class GlobalDictionary:
    matrix: np.ndarray
    row_offsets: tuple
    col_offsets: tuple

    @property
    def shape(self) -> tuple:
        return self.matrix.shape

    def block(self, row: int, col: int) -> np.ndarray:
        """Submatrix at block row ``row`` (input of layer ``row``), block column ``col``."""
        r0, r1 = self.row_offsets[row - 1], self.row_offsets[row]
        c0, c1 = self.col_offsets[col - 1], self.col_offsets[col]
        return self.matrix[r0:r1, c0:c1]


def assemble_global_dictionary(params: ModelParams, ops: NetworkOperators | None = None) -> GlobalDictionary:
    ops = _ops(params, ops)
    spec = ops.spec
    rows = np.cumsum([0] + [layer.in_size for layer in spec.layers])
    cols = np.cumsum([0] + [layer.out_size for layer in spec.layers])
    _guard(int(rows[-1]), int(cols[-1]))
    D = np.zeros((rows[-1], cols[-1]))
    gd = GlobalDictionary(D, tuple(int(r) for r in rows), tuple(int(c) for c in cols))
    for layer in spec.layers:
        j = layer.index
        gd.block(j, j)[...] = materialize_operator(layer, params, ops)
        if j < spec.n_layers:
            gd.block(j + 1, j)[...] = -np.eye(layer.out_size)
    for s in spec.skips:
        if s.source >= 1:
            gd.block(s.target, s.source)[...] = -materialize_edge(s.source, s.target, params, ops)
    return gd


# ----------------------------------------------------------------------------
# coherence metrics
# ----------------------------------------------------------------------------


def normalized_columns(D: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm copies of the nonzero columns and the indices of dropped zero columns."""
    D = np.asarray(D, dtype=float)
    norms = np.linalg.norm(D, axis=0)
    keep = norms > 0
    return D[:, keep] / norms[keep], np.flatnonzero(~keep)


def _gram(D: np.ndarray) -> np.ndarray:
    Dn, dropped = normalized_columns(D)
    if dropped.size:
        warnings.warn(f"{dropped.size} zero-norm columns excluded from coherence metrics",
                      RuntimeWarning, stacklevel=3)
    if Dn.shape[1] < 2:
        raise ValueError("coherence metrics need at least two nonzero columns")
    G = np.abs(Dn.T @ Dn)
    np.fill_diagonal(G, 0.0)
    return G


def mutual_coherence(D: np.ndarray) -> float:
    """Largest absolute normalized inner product between distinct columns."""
    return float(_gram(D).max())


def frame_potential(D: np.ndarray) -> float:
    """Mean absolute normalized inner product over ordered pairs of distinct columns."""
    G = _gram(D)
    n = G.shape[0]
    return float(G.sum() / (n * (n - 1)))


def welch_bound(rows: int, cols: int) -> float:
    """Lower bound on the coherence of any ``rows x cols`` unit-column matrix."""
    if rows < 1 or cols < 2:
        raise ValueError(f"welch bound needs rows >= 1 and cols >= 2, got {rows}x{cols}")
    if cols <= rows:
        return 0.0
    return float(np.sqrt((cols - rows) / (rows * (cols - 1))))


def lipschitz_constant(j: int, params: ModelParams, ops: NetworkOperators | None = None,
                       local: bool = False) -> float:
    """``sigma_max(B_j)^2`` plus one squared norm per outgoing edge (none when ``local``).

    Warns with ``RuntimeWarning`` if power iteration hit its sweep limit.
    """
    ops = _ops(params, ops)
    was = ops.converged
    ops.converged = True
    ops._lipschitz.pop((j, local), None)
    value = ops.lipschitz(j, local)
    if not ops.converged:
        warnings.warn(f"power iteration for layer {j} did not converge; returning last estimate",
                      RuntimeWarning, stacklevel=2)
    ops.converged = was and ops.converged
    return value


def dictionary_metrics(params: ModelParams, ops: NetworkOperators | None = None) -> dict:
    """Coherence, frame potential and Welch bound of the global dictionary."""
    gd = assemble_global_dictionary(params, ops)
    m, n = gd.shape
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return {
            "coherence": mutual_coherence(gd.matrix),
            "frame_potential": frame_potential(gd.matrix),
            "welch_bound": welch_bound(m, n),
        }
