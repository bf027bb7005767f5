import numpy as np
import pytest

from ffdfit.errors import FFDError, ParseError, ShapeMismatchError
from ffdfit.ffd import ControlLattice, assemble_tensor, build_lattice
from ffdfit.sampler import (
    SampleSet,
    draw_samples,
    field_expectation,
    update_sample_coordinates,
)
from ffdfit.shapes import icosphere

import oracles


def oracle_probs(points, center, sigma):
    w = np.array([np.exp(-sum((p[a] - center[a]) ** 2 / (2 * sigma[a] ** 2) for a in range(3)))
                  for p in points])
    return w / w.sum()


def test_shape_k16_lattice6(sphere):
    lat = build_lattice(sphere, 6)
    s = draw_samples(sphere.vertices, lat, k=16, seed=3)
    assert s.indices.shape == (216, 16)
    assert s.indices.min() >= 0 and s.indices.max() < len(sphere.vertices)
    np.testing.assert_allclose(s.sigma, lat.spacing)
    assert not s.fallback.any()


def test_single_point_support():
    lat = ControlLattice((4, 4, 4), [0, 0, 0], [1, 1, 1])
    s = draw_samples(np.array([[0.5, 0.5, 0.5]]), lat, k=5, seed=0, sigma=1e-3)
    assert np.all(s.indices == 0)


def test_empirical_frequencies_match_weights():
    rng = np.random.default_rng(5)
    pts = rng.random((20, 3))
    lat = ControlLattice((4, 4, 4), [0, 0, 0], [1, 1, 1])
    n = 100_000
    s = draw_samples(pts, lat, k=n, seed=11)
    c = 21
    p = oracle_probs(pts, lat.rest_positions[c], lat.spacing)
    freq = np.bincount(s.indices[c], minlength=len(pts)) / n
    assert 0.5 * np.abs(freq - p).sum() < 0.01


def test_uniform_fallback_flagged():
    lat = ControlLattice((4, 4, 4), [0, 0, 0], [1, 1, 1])
    pts = np.array([[1e6, 1e6, 1e6], [1e6 + 1, 1e6, 1e6]])
    s = draw_samples(pts, lat, k=50, seed=0)
    assert s.fallback.all()
    assert set(np.unique(s.indices)) <= {0, 1}


def test_determinism_and_seed(sphere):
    lat = build_lattice(sphere, 6)
    a = draw_samples(sphere.vertices, lat, 16, seed=7)
    b = draw_samples(sphere.vertices, lat, 16, seed=7)
    c = draw_samples(sphere.vertices, lat, 16, seed=8)
    assert np.array_equal(a.indices, b.indices)
    assert not np.array_equal(a.indices, c.indices)


def test_json_roundtrip(tmp_path, sphere):
    s = draw_samples(sphere.vertices, build_lattice(sphere, 6), 4, seed=1)
    s.save(tmp_path / "s.json")
    back = SampleSet.from_json((tmp_path / "s.json").read_text())
    assert np.array_equal(back.indices, s.indices)
    assert back.seed == 1
    with pytest.raises(ParseError):
        SampleSet.from_json("{nope")


def test_errors(sphere):
    lat = build_lattice(sphere, 6)
    with pytest.raises(FFDError):
        draw_samples(np.zeros((0, 3)), lat)
    with pytest.raises(FFDError):
        draw_samples(sphere.vertices, lat, k=0)


def test_coarse_samples_spread_wider():
    pts = icosphere(3, 25.0).vertices
    rng_draws = 20_000
    spreads, expected = [], []
    lat = build_lattice(pts, 4)
    c = 0
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    for n in (16, 12, 6):  # spacing grows
        sigma = lat.extent / (n - 1)
        p = oracle_probs(pts, lat.rest_positions[c], sigma)
        expected.append(float(p @ d @ p))
        s = draw_samples(pts, lat, k=rng_draws, seed=2, sigma=sigma)
        i = s.indices[c]
        spreads.append(float(d[i[: rng_draws // 2], i[rng_draws // 2:]].mean()))
    assert expected == sorted(expected)
    np.testing.assert_allclose(spreads, expected, rtol=0.05)


def test_update_coordinates(rng, sphere):
    lat = build_lattice(sphere, 6)
    s = draw_samples(sphere.vertices, lat, 4, seed=0)
    pts = sphere.vertices[s.indices.ravel()]
    T = assemble_tensor(pts, lat)
    assert np.abs(update_sample_coordinates(T, lat, pts) - pts).max() < 1e-12
    lat.displacements[:] = [1.0, 2.0, -3.0]
    moved = update_sample_coordinates(T, lat, pts)
    assert np.abs(moved - pts - [1, 2, -3]).max() < 1e-9
    lat.displacements = rng.normal(size=(216, 3))
    sub = pts[:30]
    T = assemble_tensor(sub, lat)
    ref = sub + oracles.dense_tensor(sub, lat.lo, lat.hi, lat.dims) @ lat.displacements
    assert np.abs(update_sample_coordinates(T, lat) - ref).max() < 1e-12


def test_field_expectation(rng, sphere):
    lat = build_lattice(sphere, 6)
    s = draw_samples(sphere.vertices, lat, 16, seed=0)
    const = field_expectation(s, np.full(len(sphere.vertices), 2.5))
    np.testing.assert_array_equal(const, 2.5)
    f = rng.normal(size=len(sphere.vertices))
    got = field_expectation(s, f)
    ref = [sum(f[i] for i in row) / 16 for row in s.indices]
    np.testing.assert_allclose(got, ref, atol=1e-14)
    vec = rng.normal(size=(len(sphere.vertices), 3))
    assert field_expectation(s, vec).shape == (216, 3)
    s1 = draw_samples(sphere.vertices, lat, 1, seed=0)
    np.testing.assert_array_equal(field_expectation(s1, f), f[s1.indices[:, 0]])
    with pytest.raises(ShapeMismatchError):
        field_expectation(s, f[:10])
