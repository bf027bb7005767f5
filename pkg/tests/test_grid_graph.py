import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ffdfit.errors import FFDError, ShapeMismatchError
from ffdfit.grid_graph import (
    ChebyshevFilter,
    GridGraph,
    build_grid_graph,
    chebyshev_filter,
    chebyshev_filter_grad,
    estimate_lambda_max,
    normalized_laplacian,
    scaled_laplacian,
    smooth_update,
)

import oracles


def node(dims, i, j, k):
    return (i * dims[1] + j) * dims[2] + k


def test_degrees_666_by_position():
    g = build_grid_graph((6, 6, 6))
    d = (6, 6, 6)
    assert g.degree[node(d, 0, 0, 0)] == 7
    assert g.degree[node(d, 0, 0, 3)] == 11
    assert g.degree[node(d, 0, 3, 3)] == 17
    assert g.degree[node(d, 3, 3, 3)] == 26


def test_two_cube_all_corners():
    g = build_grid_graph((2, 2, 2))
    assert np.all(g.degree == 7)
    assert g.n_edges == 28


@pytest.mark.parametrize("dims", [(6, 6, 6), (2, 3, 4), (3, 3, 5)])
def test_edges_match_brute_force(dims):
    g = build_grid_graph(dims)
    A = oracles.brute_adjacency(dims)
    assert np.array_equal(g.adjacency.toarray(), A)
    assert g.n_edges == int(A.sum()) // 2


def combinatorial_histogram(a, b, c):
    """Degree histogram from counting boundary incidences per node."""
    hist = {}
    for i, j, k in itertools.product(range(a), range(b), range(c)):
        deg = 1
        for x, n in ((i, a), (j, b), (k, c)):
            deg *= 2 if x in (0, n - 1) else 3
        deg -= 1
        hist[deg] = hist.get(deg, 0) + 1
    return hist


@given(st.integers(2, 7), st.integers(2, 7), st.integers(2, 7))
def test_degree_histogram_property(a, b, c):
    g = build_grid_graph((a, b, c))
    vals, counts = np.unique(g.degree, return_counts=True)
    assert dict(zip(vals.tolist(), counts.tolist())) == combinatorial_histogram(a, b, c)
    assert (g.adjacency != g.adjacency.T).nnz == 0
    assert g.adjacency.diagonal().sum() == 0


def test_degree_histogram_666_counts():
    g = build_grid_graph(6)
    vals, counts = np.unique(g.degree, return_counts=True)
    assert dict(zip(vals.tolist(), counts.tolist())) == {7: 8, 11: 48, 17: 96, 26: 64}


def test_bad_dims():
    with pytest.raises(FFDError):
        build_grid_graph((1, 4, 4))


def test_l_norm_uniform_degree():
    g = build_grid_graph((2, 2, 2))
    L = normalized_laplacian(g).toarray()
    np.testing.assert_allclose(L, np.eye(8) - g.adjacency.toarray() / 7, atol=1e-15)


def test_isolated_node_rejected():
    import scipy.sparse as sp
    g = GridGraph((2, 2, 2), sp.csr_matrix((8, 8)), np.zeros(8, dtype=int))
    with pytest.raises(FFDError):
        normalized_laplacian(g)


@pytest.mark.parametrize("dims", [(2, 2, 2), (3, 3, 3), (4, 4, 4), (2, 3, 4)])
def test_scaled_laplacian_dense_oracle(dims):
    g = build_grid_graph(dims)
    A = oracles.brute_adjacency(dims)
    ref, w = oracles.dense_scaled_laplacian(A, lambda_max=2.0)
    assert np.abs(scaled_laplacian(g).toarray() - ref).max() < 1e-9
    # with the exact largest eigenvalue
    lam = w.max()
    ref, _ = oracles.dense_scaled_laplacian(A)
    assert np.abs(scaled_laplacian(g, lam).toarray() - ref).max() < 1e-9
    ev = np.linalg.eigvalsh(scaled_laplacian(g, lam).toarray())
    assert ev.min() >= -1 - 1e-9 and ev.max() <= 1 + 1e-6


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_l_norm_spectrum_in_0_2(n):
    L = normalized_laplacian(build_grid_graph(n)).toarray()
    np.testing.assert_array_equal(L, L.T)
    ev = np.linalg.eigvalsh(L)
    assert ev.min() > -1e-12 and ev.max() < 2 + 1e-12


def test_lambda_max_estimate():
    g = build_grid_graph((4, 4, 4))
    exact = np.linalg.eigvalsh(normalized_laplacian(g).toarray()).max()
    est = estimate_lambda_max(g, tol=1e-12, max_iter=100000)
    assert abs(est - exact) < 1e-4


# --- Chebyshev filter -------------------------------------------------------

def dense_filter(t0, t1, f, L, act):
    z = t0 @ f + t1 @ f @ L
    return np.maximum(z, 0) if act == "relu" else z


def test_identity_filter(rng):
    L = scaled_laplacian(build_grid_graph(4))
    f = rng.normal(size=(3, 64))
    out = chebyshev_filter(ChebyshevFilter(np.eye(3), np.zeros((3, 3))), f, L)
    np.testing.assert_array_equal(out, f)


def test_constant_features_propagation():
    g = build_grid_graph(4)
    L = scaled_laplacian(g)
    f = np.tile(np.arange(1.0, 3.0)[:, None], (1, 64))
    out = chebyshev_filter(ChebyshevFilter(np.zeros((2, 2)), np.eye(2)), f, L)
    assert np.abs(out - f @ L.toarray()).max() < 1e-12


@pytest.mark.parametrize("act", ["identity", "relu"])
def test_filter_dense_and_gradient(rng, act):
    L = scaled_laplacian(build_grid_graph(4))
    Ld = L.toarray()
    f = rng.normal(size=(5, 64))
    t0, t1 = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    filt = ChebyshevFilter(t0, t1, act)
    out = chebyshev_filter(filt, f, L)
    assert np.abs(out - dense_filter(t0, t1, f, Ld, act)).max() < 1e-10

    W = rng.normal(size=out.shape)
    g0, g1 = chebyshev_filter_grad(filt, f, L, W)

    def J0(t):
        return float((W * dense_filter(t, t1, f, Ld, act)).sum())

    def J1(t):
        return float((W * dense_filter(t0, t, f, Ld, act)).sum())

    for g, J, t in ((g0, J0, t0), (g1, J1, t1)):
        fd = oracles.central_diff(J, t, h=1e-6)
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_filter_linearity(a, b):
    rng = np.random.default_rng(1)
    L = scaled_laplacian(build_grid_graph(3))
    filt = ChebyshevFilter(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
    x, y = rng.normal(size=(3, 27)), rng.normal(size=(3, 27))
    lhs = chebyshev_filter(filt, a * x + b * y, L)
    rhs = a * chebyshev_filter(filt, x, L) + b * chebyshev_filter(filt, y, L)
    assert np.abs(lhs - rhs).max() < 1e-10


def test_filter_shape_errors(rng):
    L = scaled_laplacian(build_grid_graph(3))
    with pytest.raises(ShapeMismatchError):
        ChebyshevFilter(np.eye(2), np.eye(3))
    filt = ChebyshevFilter(np.eye(2), np.eye(2))
    with pytest.raises(ShapeMismatchError):
        chebyshev_filter(filt, rng.normal(size=(3, 27)), L)
    with pytest.raises(ShapeMismatchError):
        chebyshev_filter(filt, rng.normal(size=(2, 26)), L)


def test_smooth_update_formula(rng):
    L = scaled_laplacian(build_grid_graph(4))
    u = rng.normal(size=(64, 3))
    s = 0.3
    ref = (1 - s) * u + s * (u - (u.T @ L.toarray().T).T)
    np.testing.assert_allclose(smooth_update(u, L, s), ref, atol=1e-12)
    np.testing.assert_array_equal(smooth_update(u, L, 0.0), u)
    with pytest.raises(FFDError):
        smooth_update(u, L, 1.5)
