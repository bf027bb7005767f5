"""Procedural closed test surfaces."""

from __future__ import annotations

import numpy as np

from .mesh_io import TemplateMesh


def icosphere(subdivisions: int = 4, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TemplateMesh:
    """Subdivided icosahedron; 4 subdivisions give 2562 vertices / 5120 faces."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = np.asarray(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.asarray(faces, dtype=np.int64)
    for _ in range(subdivisions):
        v, f = _subdivide(v, f)
    return TemplateMesh(v * radius + np.asarray(center, dtype=np.float64), f)


def _subdivide(v, f):
    edges = np.sort(f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    mid = v[uniq[:, 0]] + v[uniq[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    base = len(v)
    m = inv.reshape(-1, 3) + base  # midpoints of edges (a,b), (b,c), (c,a)
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
    nf = np.concatenate([
        np.stack([a, ab, ca], 1),
        np.stack([b, bc, ab], 1),
        np.stack([c, ca, bc], 1),
        np.stack([ab, bc, ca], 1),
    ])
    return np.vstack([v, mid]), nf


def box(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TemplateMesh:
    """Axis-aligned box as 12 outward-facing triangles."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)])
    quads = [
        (0, 2, 3, 1),  # z = lo
        (4, 5, 7, 6),  # z = hi
        (0, 1, 5, 4),  # y = lo
        (2, 6, 7, 3),  # y = hi
        (0, 4, 6, 2),  # x = lo
        (1, 3, 7, 5),  # x = hi
    ]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TemplateMesh(corners, np.asarray(tris))


def torus(major: float = 1.0, minor: float = 0.35, n_major: int = 32, n_minor: int = 16,
          center=(0.0, 0.0, 0.0)) -> TemplateMesh:
    """Torus around the z axis."""
    u = np.arange(n_major) * 2 * np.pi / n_major
    w = np.arange(n_minor) * 2 * np.pi / n_minor
    uu, ww = np.meshgrid(u, w, indexing="ij")
    r = major + minor * np.cos(ww)
    verts = np.stack([r * np.cos(uu), r * np.sin(uu), minor * np.sin(ww)], -1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    i1 = (i + 1) % n_major
    j1 = (j + 1) % n_minor
    a = i * n_minor + j
    b = i1 * n_minor + j
    c = i1 * n_minor + j1
    d = i * n_minor + j1
    tris = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3),
                           np.stack([a, c, d], -1).reshape(-1, 3)])
    return TemplateMesh(verts + np.asarray(center, dtype=np.float64), tris)


def scaled(mesh: TemplateMesh, factors, about=None) -> TemplateMesh:
    """Anisotropic scaling about ``about`` (default: vertex centroid)."""
    v = mesh.vertices
    c = v.mean(0) if about is None else np.asarray(about, dtype=np.float64)
    return mesh.with_vertices((v - c) * np.asarray(factors, dtype=np.float64) + c)
