"""Simulation-prep steps: planar inlet/outlet caps and temporal upsampling."""

from __future__ import annotations

import fnmatch

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import DegenerateGeometryError, FFDError, SequenceError
from .mesh_io import MeshSequence, TemplateMesh

_TIME_SNAP = 1e-9


def fit_plane(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Total least-squares plane ``n . x = offset`` through ``points``.

    The normal is unit length with a positive component along its largest
    magnitude axis.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateGeometryError(f"need at least 3 points to fit a plane, got {len(pts)}")
    c = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - c, full_matrices=False)
    scale = max(float(s[0]), 1e-300)
    if s[1] <= 1e-12 * scale:
        raise DegenerateGeometryError("points are collinear (or coincident)")
    n = vt[-1]
    if n[np.argmax(np.abs(n))] < 0:
        n = -n
    return n, float(n @ c)


def _select_tags(mesh: TemplateMesh, patterns) -> list[str]:
    if isinstance(patterns, str):
        patterns = [p for p in patterns.split(",") if p]
    names = []
    for pat in patterns:
        hits = sorted(t for t in mesh.tags if fnmatch.fnmatchcase(t, pat))
        if not hits:
            raise FFDError(f"no tag matches {pat!r}", code="unknown-tag")
        names += [h for h in hits if h not in names]
    return names


def cap_vertices(mesh: TemplateMesh, tag_names) -> dict[str, np.ndarray]:
    """Vertices used only by triangles of each named cap.

    Raises when two caps share such a vertex (i.e. a vertex whose incident
    triangles all belong to caps but to more than one of them).
    """
    names = _select_tags(mesh, tag_names)
    n_tri = len(mesh.triangles)
    owner = np.full(n_tri, -1, dtype=np.int64)
    for ci, name in enumerate(names):
        tris = mesh.tags[name]
        clash = tris[owner[tris] >= 0]
        if len(clash):
            other = names[owner[clash[0]]]
            raise FFDError(
                f"caps {other!r} and {name!r} share triangle {int(clash[0])}",
                code="overlapping-caps",
            )
        owner[tris] = ci
    # per vertex: the set of owners of incident triangles
    vid = mesh.triangles.ravel()
    tri_owner = np.repeat(owner, 3)
    nv = len(mesh.vertices)
    lo = np.full(nv, np.iinfo(np.int64).max)
    hi = np.full(nv, -2, dtype=np.int64)
    np.minimum.at(lo, vid, tri_owner)
    np.maximum.at(hi, vid, tri_owner)
    result = {}
    for ci, name in enumerate(names):
        result[name] = np.flatnonzero((lo == ci) & (hi == ci))
    shared = np.flatnonzero((lo >= 0) & (hi > lo))
    if len(shared):
        raise FFDError(
            f"vertex {int(shared[0])} is interior to more than one cap "
            f"({names[lo[shared[0]]]!r}, {names[hi[shared[0]]]!r})",
            code="overlapping-caps",
        )
    return result


def project_caps(mesh: TemplateMesh, tag_names) -> TemplateMesh:
    """Project each cap's exclusive vertices onto the cap's best-fit plane.

    Rim vertices shared with the wall stay where they are, so the plane is
    fitted to the rim: it is the fixed point of alternating a least-squares
    fit over the whole cap with projection, which makes the result planar
    whenever the rim is and the operation idempotent. Caps without a usable
    rim (fewer than 3 points, or collinear) fall back to fitting every cap
    vertex.
    """
    exclusive = cap_vertices(mesh, tag_names)
    v = np.array(mesh.vertices)
    for name, verts in exclusive.items():
        ring = np.unique(mesh.triangles[mesh.tags[name]])
        rim = np.setdiff1d(ring, verts)
        try:
            n, d = fit_plane(mesh.vertices[rim])
        except DegenerateGeometryError:
            n, d = fit_plane(mesh.vertices[ring])
        if len(verts):
            v[verts] -= np.outer(v[verts] @ n - d, n)
    return mesh.with_vertices(v)


def plane_residual(points: np.ndarray) -> float:
    """Root of the summed squared orthogonal distances to the best-fit plane."""
    n, d = fit_plane(points)
    r = np.asarray(points) @ n - d
    return float(np.sqrt(r @ r))


def _query_times(t0: float, span: float, dt: float) -> np.ndarray:
    n = int(np.floor(span / dt + 1e-9)) + 1
    return t0 + np.arange(n) * dt


def interpolate_sequence(seq: MeshSequence, dt: float, mode: str = "linear",
                         period: float | None = None) -> MeshSequence:
    """Resample a mesh sequence every ``dt`` seconds, endpoints included.

    ``mode`` is ``"linear"`` or ``"cubic"`` (periodic cubic spline). With a
    ``period`` the sequence is treated as one cycle: the output covers
    ``[t_first, t_first + period]`` and wraps from the last frame back to the
    first. Queries that coincide with an input frame time return that frame's
    vertices unchanged.
    """
    if mode not in ("linear", "cubic"):
        raise FFDError(f"unknown interpolation mode {mode!r}")
    times = np.asarray(seq.frame_times, dtype=np.float64)
    verts = np.stack([f.vertices for f in seq.frames])  # (T, N, 3)
    if period is not None:
        period = float(period)
        if period <= times[-1] - times[0]:
            raise SequenceError(
                f"period {period} must exceed the frame time span {times[-1] - times[0]}"
            )
        times = np.append(times, times[0] + period)
        verts = np.concatenate([verts, verts[:1]])
    elif mode == "cubic":
        # periodic spline over the given frames: the last frame closes the cycle
        if not np.array_equal(verts[0], verts[-1]):
            raise SequenceError(
                "cubic mode without a period needs the last frame to repeat the first"
            )
    span = times[-1] - times[0]
    if not dt > 0 or dt > span:
        raise SequenceError(f"dt must lie in (0, {span}], got {dt}")

    q = _query_times(times[0], span, dt)
    q = np.minimum(q, times[-1])
    flat = verts.reshape(len(times), -1)
    if mode == "linear":
        k = np.clip(np.searchsorted(times, q, side="right") - 1, 0, len(times) - 2)
        w = ((q - times[k]) / (times[k + 1] - times[k]))[:, None]
        out = (1 - w) * flat[k] + w * flat[k + 1]
    else:
        out = CubicSpline(times, flat, axis=0, bc_type="periodic")(q)
    # exact reproduction at input frames
    nearest = np.clip(np.searchsorted(times, q), 0, len(times) - 1)
    for cand in (nearest, np.maximum(nearest - 1, 0)):
        hit = np.abs(times[cand] - q) <= _TIME_SNAP * max(1.0, abs(span))
        out[hit] = flat[cand[hit]]
        q[hit] = times[cand[hit]]
    base = seq.frames[0]
    frames = tuple(base.with_vertices(o.reshape(-1, 3)) for o in out)
    return MeshSequence(frames, q)
