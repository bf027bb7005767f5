import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ffdfit.errors import DegenerateGeometryError, FFDError, SequenceError
from ffdfit.mesh_io import MeshSequence, TemplateMesh
from ffdfit.postproc import (
    cap_vertices,
    fit_plane,
    interpolate_sequence,
    plane_residual,
    project_caps,
)
from ffdfit.shapes import icosphere


def capped_tube(n=12, length=4.0, lift=0.0):
    """Open cylinder closed by two fan caps at z=0 and z=length, tags per cap."""
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    ring = np.stack([np.cos(ang), np.sin(ang), np.zeros(n)], 1)
    v = np.vstack([ring, ring + [0, 0, length], [[0, 0, 0], [0, 0, length]]])
    v[-2, 2] += lift
    bottom, top = 2 * n, 2 * n + 1
    tris = []
    for i in range(n):
        j = (i + 1) % n
        tris += [[i, j, n + j], [i, n + j, n + i]]
    wall = len(tris)
    tris += [[bottom, (i + 1) % n, i] for i in range(n)]
    tris += [[top, n + i, n + (i + 1) % n] for i in range(n)]
    tags = {"inlet": np.arange(wall, wall + n), "outlet": np.arange(wall + n, wall + 2 * n)}
    return TemplateMesh(v, tris, tags=tags)


# --- plane fit --------------------------------------------------------------

def test_plane_through_square():
    pts = np.array([[0, 0, 2], [1, 0, 2], [1, 1, 2], [0, 1, 2.0]])
    n, d = fit_plane(pts)
    np.testing.assert_allclose(n, [0, 0, 1], atol=1e-15)
    assert d == pytest.approx(2.0, abs=1e-15)
    assert plane_residual(pts) < 1e-15


def test_noisy_plane_angle(rng):
    normal = np.array([1.0, 2.0, 2.0]) / 3
    basis = np.linalg.svd(normal[None])[2][1:]
    pts = rng.uniform(-10, 10, (500, 2)) @ basis + 5 * normal
    pts += rng.normal(scale=0.01, size=pts.shape)
    n, d = fit_plane(pts)
    angle = np.degrees(np.arccos(min(1.0, abs(n @ normal))))
    assert angle < 0.5
    assert d == pytest.approx(5.0, abs=0.01)


def test_collinear_and_too_few():
    with pytest.raises(DegenerateGeometryError):
        fit_plane(np.outer(np.arange(5.0), [1, 2, 3]))
    with pytest.raises(DegenerateGeometryError):
        fit_plane(np.zeros((2, 3)))


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50))
def test_plane_fit_translation_equivariant(x, y, z):
    pts = np.array([[0, 0, 0], [1, 0, 0.1], [0, 1, -0.2], [1, 1, 0.05], [0.5, 0.2, 0.0]])
    n0, d0 = fit_plane(pts)
    n1, d1 = fit_plane(pts + [x, y, z])
    np.testing.assert_allclose(n1, n0, atol=1e-9)
    assert d1 == pytest.approx(d0 + n0 @ [x, y, z], abs=1e-9)


# --- caps -------------------------------------------------------------------

def test_planar_caps_unchanged():
    m = capped_tube()
    out = project_caps(m, ["inlet", "outlet"])
    np.testing.assert_allclose(out.vertices, m.vertices, atol=1e-15)
    assert np.array_equal(out.triangles, m.triangles)


def test_lifted_center_is_flattened():
    m = capped_tube(lift=1.0)
    out = project_caps(m, "inlet,outlet")
    diag = np.linalg.norm(np.ptp(m.vertices, axis=0))
    for name in ("inlet", "outlet"):
        ring = np.unique(out.triangles[out.tags[name]])
        assert plane_residual(out.vertices[ring]) < 1e-9 * diag
    moved = np.linalg.norm(out.vertices - m.vertices, axis=1)
    assert moved.max() <= 1.0
    # rim vertices are shared with the wall and stay put
    assert np.all(moved[:24] == 0)
    again = project_caps(out, ["inlet", "outlet"])
    np.testing.assert_allclose(again.vertices, out.vertices, atol=1e-12)


def test_warped_rim_residual_not_increased(rng):
    m = capped_tube(n=16)
    v = np.array(m.vertices)
    v[:16, 2] += rng.normal(scale=0.05, size=16)  # non-planar bottom rim
    v[-2, 2] += 0.7
    m = m.with_vertices(v)
    out = project_caps(m, ["inlet"])
    ring = np.unique(m.triangles[m.tags["inlet"]])
    assert plane_residual(out.vertices[ring]) <= plane_residual(m.vertices[ring])
    np.testing.assert_allclose(project_caps(out, ["inlet"]).vertices, out.vertices, atol=1e-12)


def test_glob_and_unknown_tags():
    m = capped_tube(lift=0.1)
    out = project_caps(m, ["*let"])
    assert abs(out.vertices[-2, 2]) < 1.0
    with pytest.raises(FFDError, match="no tag"):
        project_caps(m, ["valve"])


def test_overlapping_caps():
    m = capped_tube()
    tags = dict(m.tags)
    tags["both"] = np.concatenate([tags["inlet"][:2], tags["outlet"][:1]])
    m2 = TemplateMesh(m.vertices, m.triangles, tags=tags)
    with pytest.raises(FFDError) as info:
        cap_vertices(m2, ["inlet", "both"])
    assert info.value.code == "overlapping-caps"


# --- temporal interpolation ---------------------------------------------------

def cycle(n_frames=10, period=1.0):
    base = icosphere(1, 1.0)
    t = np.arange(n_frames) * period / n_frames
    frames = tuple(base.with_vertices(base.vertices * (1 + 0.1 * np.sin(2 * np.pi * ti / period)))
                   for ti in t)
    return MeshSequence(frames, t)


@pytest.mark.parametrize("mode", ["linear", "cubic"])
def test_thousand_and_one_frames(mode):
    seq = cycle()
    out = interpolate_sequence(seq, 0.001, mode=mode, period=1.0)
    assert len(out) == 1001
    np.testing.assert_allclose(out.frame_times, np.arange(1001) * 0.001, atol=1e-12)
    for f in out.frames:
        assert np.array_equal(f.triangles, seq.frames[0].triangles)
    for i in range(10):
        np.testing.assert_array_equal(out.frames[100 * i].vertices, seq.frames[i].vertices)
    np.testing.assert_array_equal(out.frames[1000].vertices, seq.frames[0].vertices)


def test_linear_midpoint():
    seq = cycle()
    out = interpolate_sequence(seq, 0.05, mode="linear", period=1.0)
    mid = 0.5 * (seq.frames[3].vertices + seq.frames[4].vertices)
    np.testing.assert_allclose(out.frames[7].vertices, mid, atol=1e-12)


def test_cubic_seam_is_smooth():
    seq = cycle()
    out = interpolate_sequence(seq, 0.001, mode="cubic", period=1.0)
    v = np.stack([f.vertices for f in out.frames])
    h = 0.001
    left = (v[1000] - v[999]) / h
    right = (v[1] - v[0]) / h
    inner = (v[501] - v[500]) / h
    scale = np.abs(inner).max()
    # one-sided differences agree to O(h) across the wrap point
    assert np.abs(left - right).max() < 0.01 * scale


def test_cubic_without_period_needs_closed_cycle():
    seq = cycle()
    with pytest.raises(SequenceError):
        interpolate_sequence(seq, 0.01, mode="cubic")
    closed = MeshSequence(seq.frames + seq.frames[:1], np.arange(11) * 0.1)
    out = interpolate_sequence(closed, 0.001, mode="cubic")
    assert len(out) == 1001


def test_interp_errors():
    seq = cycle()
    with pytest.raises(SequenceError):
        interpolate_sequence(seq, 5.0)
    with pytest.raises(SequenceError):
        interpolate_sequence(seq, 0.0)
    with pytest.raises(SequenceError):
        interpolate_sequence(seq, 0.01, period=0.5)
    with pytest.raises(FFDError):
        interpolate_sequence(seq, 0.01, mode="quadratic")
