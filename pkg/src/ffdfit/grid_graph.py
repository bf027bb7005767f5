"""Graph operators on the control grid.

Each control is joined to every grid neighbour whose indices differ by at most
one per axis (26-neighbourhood in the interior). The first-order Chebyshev
graph convolution works on feature matrices laid out as (features, nodes)::

    f_out = act(theta0 @ f_in + theta1 @ f_in @ L_scaled)
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import FFDError, ShapeMismatchError


@dataclass
class GridGraph:
    dims: tuple[int, int, int]
    adjacency: sp.csr_matrix
    degree: np.ndarray
    lambda_max: float = 2.0

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        return self.adjacency.nnz // 2


def build_grid_graph(dims) -> GridGraph:
    """26-neighbourhood adjacency of a ``dims`` control grid (zero diagonal)."""
    dims = tuple(int(d) for d in (dims if not np.isscalar(dims) else (dims,) * 3))
    if len(dims) != 3 or min(dims) < 2:
        raise FFDError(f"grid dims must be three values >= 2, got {dims}")
    idx = np.arange(int(np.prod(dims))).reshape(dims)
    rows, cols = [], []
    for off in itertools.product((-1, 0, 1), repeat=3):
        if off == (0, 0, 0):
            continue
        src = tuple(slice(max(0, -o), d - max(0, o)) for o, d in zip(off, dims))
        dst = tuple(slice(max(0, o), d - max(0, -o)) for o, d in zip(off, dims))
        rows.append(idx[src].ravel())
        cols.append(idx[dst].ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    n = idx.size
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    adj.sort_indices()
    degree = np.diff(adj.indptr).astype(np.int64)
    return GridGraph(dims, adj, degree)


def normalized_laplacian(graph: GridGraph) -> sp.csr_matrix:
    """``I - D^-1/2 A D^-1/2``."""
    if np.any(graph.degree == 0):
        raise FFDError(f"graph has {int((graph.degree == 0).sum())} isolated node(s)")
    d = 1.0 / np.sqrt(graph.degree.astype(np.float64))
    D = sp.diags(d)
    return (sp.identity(graph.n_nodes, format="csr") - D @ graph.adjacency @ D).tocsr()


def estimate_lambda_max(graph: GridGraph, tol: float = 1e-8, max_iter: int = 10_000,
                        seed: int = 0) -> float:
    """Largest eigenvalue of the normalized Laplacian by power iteration."""
    L = normalized_laplacian(graph)
    x = np.random.default_rng(seed).standard_normal(graph.n_nodes)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = L @ x
        new = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            return new
        lam = new
    return lam


def scaled_laplacian(graph: GridGraph, lambda_max: float | None = None) -> sp.csr_matrix:
    """``2 L_norm / lambda_max - I``, with ``graph.lambda_max`` by default."""
    lam = graph.lambda_max if lambda_max is None else float(lambda_max)
    if lam <= 0:
        raise FFDError("lambda_max must be positive")
    L = normalized_laplacian(graph)
    out = (2.0 / lam) * L - sp.identity(graph.n_nodes, format="csr")
    return out.tocsr()


@dataclass
class ChebyshevFilter:
    """First-order Chebyshev graph filter with weights of shape (d_out, d_in)."""

    theta0: np.ndarray
    theta1: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.theta0 = np.atleast_2d(np.asarray(self.theta0, dtype=np.float64))
        self.theta1 = np.atleast_2d(np.asarray(self.theta1, dtype=np.float64))
        if self.theta0.shape != self.theta1.shape:
            raise ShapeMismatchError(
                f"theta0 {self.theta0.shape} and theta1 {self.theta1.shape} differ"
            )
        if self.activation not in ("identity", "relu"):
            raise FFDError(f"unknown activation {self.activation!r}")

    @property
    def d_in(self) -> int:
        return self.theta0.shape[1]

    @property
    def d_out(self) -> int:
        return self.theta0.shape[0]


def _propagate(f_in, L):
    # (L^T f_in^T)^T == f_in @ L, keeps the sparse matrix on the left
    return (L.T @ f_in.T).T


def _preactivation(filt: ChebyshevFilter, f_in, L):
    f_in = np.atleast_2d(np.asarray(f_in, dtype=np.float64))
    if f_in.shape[0] != filt.d_in:
        raise ShapeMismatchError(f"features have {f_in.shape[0]} rows, filter expects {filt.d_in}")
    if L.shape != (f_in.shape[1], f_in.shape[1]):
        raise ShapeMismatchError(f"Laplacian {L.shape} does not match {f_in.shape[1]} nodes")
    fl = _propagate(f_in, L)
    return f_in, fl, filt.theta0 @ f_in + filt.theta1 @ fl


def chebyshev_filter(filt: ChebyshevFilter, f_in: np.ndarray, L) -> np.ndarray:
    """Apply the filter to (d_in, nodes) features; returns (d_out, nodes)."""
    _, _, z = _preactivation(filt, f_in, L)
    if filt.activation == "relu":
        return np.maximum(z, 0.0)
    return z


def chebyshev_filter_grad(filt: ChebyshevFilter, f_in: np.ndarray, L, grad_out: np.ndarray):
    """Gradients of ``sum(grad_out * f_out)`` w.r.t. theta0 and theta1."""
    f_in, fl, z = _preactivation(filt, f_in, L)
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != z.shape:
        raise ShapeMismatchError(f"grad_out {g.shape} != output {z.shape}")
    if filt.activation == "relu":
        g = g * (z > 0)
    return g @ f_in.T, g @ fl.T


def smooth_update(update: np.ndarray, L, strength: float) -> np.ndarray:
    """Blend a (nodes, 3) update with its Laplacian-filtered version.

    ``(1 - s) u + s (u - u L^T)`` in the filter's (features, nodes) layout,
    i.e. the Chebyshev filter with ``theta0 = I`` and ``theta1 = -s I``.
    """
    if not 0.0 <= strength <= 1.0:
        raise FFDError("smoothing strength must lie in [0, 1]")
    d = update.shape[1]
    filt = ChebyshevFilter(np.eye(d), -strength * np.eye(d))
    return chebyshev_filter(filt, update.T, L.T).T
