"""Occupancy grids: rasterizing closed meshes and raw volume I/O.

A grid of ``dims`` voxels starts at ``origin`` (the minimum corner, mm) with
``spacing`` mm per voxel; voxel ``(i, j, k)`` is centered at
``origin + (ijk + 0.5) * spacing``.

On disk a grid is a raw little-endian array in x-fastest order plus a JSON
sidecar ``<path>.json`` holding ``dims``, ``spacing``, ``origin`` and ``dtype``
(``uint8`` for binary grids, ``float32`` for probabilities).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FFDError, ParseError, ShapeMismatchError, WatertightError
from .mesh_io import TemplateMesh

_EDGE_TOL = 1e-10
_MAX_RECASTS = 16


@dataclass
class OccupancyGrid:
    values: np.ndarray      # (nx, ny, nz)
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise FFDError(f"grid values must be a nonempty 3-D array, got {self.values.shape}")
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=np.float64), (3,)).copy()
        self.origin = np.broadcast_to(np.asarray(self.origin, dtype=np.float64), (3,)).copy()
        if np.any(self.spacing <= 0):
            raise FFDError("grid spacing must be positive")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise FFDError("occupancy values must lie in [0, 1]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0) | (self.values == 1)))

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.spacing[axis]

    def center_points(self) -> np.ndarray:
        g = np.meshgrid(self.centers(0), self.centers(1), self.centers(2), indexing="ij")
        return np.stack(g, axis=-1).reshape(-1, 3)

    def same_geometry(self, other: "OccupancyGrid") -> bool:
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing, rtol=1e-12, atol=0)
                and np.allclose(self.origin, other.origin, rtol=1e-12, atol=1e-12))


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    @classmethod
    def covering(cls, points: np.ndarray, dims, padding_fraction: float = 0.05) -> "GridSpec":
        """Grid of ``dims`` voxels over the padded bounding box of ``points``."""
        pts = np.asarray(points, dtype=np.float64)
        lo, hi = pts.min(0), pts.max(0)
        pad = padding_fraction * (hi - lo)
        lo, hi = lo - pad, hi + pad
        dims = tuple(int(d) for d in dims)
        spacing = (hi - lo) / np.asarray(dims)
        return cls(dims, tuple(float(s) for s in spacing), tuple(float(o) for o in lo))

    @classmethod
    def centered(cls, points: np.ndarray, dims, spacing) -> "GridSpec":
        """Grid with the given spacing centered on the bounding box of ``points``."""
        pts = np.asarray(points, dtype=np.float64)
        dims = np.asarray([int(d) for d in dims])
        spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
        mid = 0.5 * (pts.min(0) + pts.max(0))
        origin = mid - 0.5 * dims * spacing
        return cls(tuple(int(d) for d in dims), tuple(float(s) for s in spacing),
                   tuple(float(o) for o in origin))


def boundary_edges(mesh: TemplateMesh) -> np.ndarray:
    """Undirected edges not shared by exactly two triangles."""
    e = np.sort(mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq[counts != 2]


def check_watertight(mesh: TemplateMesh) -> None:
    bad = boundary_edges(mesh)
    if len(bad):
        shown = ", ".join(f"({a},{b})" for a, b in bad[:10])
        more = f" and {len(bad) - 10} more" if len(bad) > 10 else ""
        raise WatertightError(f"mesh is not watertight; {len(bad)} bad edges: {shown}{more}")


def _edge_functions(tri, qy, qz):
    """Barycentric coordinates of query points in the yz projection of triangles.

    ``tri`` is (m, 3, 3); ``qy``/``qz`` are (m,). Returns (w, area) where w is
    (m, 3) normalized by the signed projected area.
    """
    ay, az = tri[:, 0, 1], tri[:, 0, 2]
    by, bz = tri[:, 1, 1], tri[:, 1, 2]
    cy, cz = tri[:, 2, 1], tri[:, 2, 2]
    area = (by - ay) * (cz - az) - (bz - az) * (cy - ay)
    w0 = (cy - by) * (qz - bz) - (cz - bz) * (qy - by)
    w1 = (ay - cy) * (qz - cz) - (az - cz) * (qy - cy)
    w2 = (by - ay) * (qz - az) - (bz - az) * (qy - ay)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.stack([w0, w1, w2], axis=1) / area[:, None]
    return w, area


def _hits(tri, qy, qz, scale):
    """Classify ray/triangle pairs: returns (hit, ambiguous, x_crossing)."""
    w, area = _edge_functions(tri, qy, qz)
    flat = np.abs(area) <= _EDGE_TOL * scale * scale
    wmin = np.where(flat, -1.0, w.min(axis=1))
    hit = wmin > _EDGE_TOL
    near = (wmin >= -_EDGE_TOL) & ~hit
    xc = np.einsum("ij,ij->i", np.nan_to_num(w), tri[:, :, 0])
    return hit, near, xc


def _column_parity(tri, ys, zs, xs, scale):
    """Inside flags for voxel centers ``xs`` on rays through every (y, z) column.

    Brute force over all triangles; used for re-cast columns. Returns
    (inside (ncol, nx), ambiguous (ncol,)).
    """
    ncol = len(ys)
    inside = np.zeros((ncol, len(xs)), dtype=bool)
    amb = np.zeros(ncol, dtype=bool)
    m = len(tri)
    for c in range(ncol):
        hit, near, xc = _hits(tri, np.full(m, ys[c]), np.full(m, zs[c]), scale)
        if near.any():
            amb[c] = True
            continue
        xc = xc[hit]
        if np.any(np.abs(xc[:, None] - xs[None, :]) <= _EDGE_TOL * scale):
            amb[c] = True
            continue
        inside[c] = ((xc[:, None] > xs[None, :]).sum(axis=0) % 2) == 1
    return inside, amb


def voxelize(mesh: TemplateMesh, spec: GridSpec, seed: int = 0) -> OccupancyGrid:
    """Binary occupancy of voxel centers by ray parity along +x.

    Rays that graze a triangle edge or vertex, or voxel centers lying on the
    surface, are re-cast from a slightly jittered column position.
    """
    check_watertight(mesh)
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    ox, oy, oz = spec.origin
    out = np.zeros((nx, ny, nz))
    if len(mesh.triangles) == 0:
        return OccupancyGrid(out, spec.spacing, spec.origin)

    tri = mesh.vertices[mesh.triangles]  # (F, 3, 3)
    scale = float(np.abs(tri).max() + max(spec.spacing) * max(spec.dims))
    xs = ox + (np.arange(nx) + 0.5) * sx

    # candidate (triangle, column) pairs from projected bounding boxes
    ymin, ymax = tri[:, :, 1].min(1), tri[:, :, 1].max(1)
    zmin, zmax = tri[:, :, 2].min(1), tri[:, :, 2].max(1)
    j0 = np.clip(np.ceil((ymin - oy) / sy - 0.5 - 1e-9), 0, ny).astype(np.int64)
    j1 = np.clip(np.floor((ymax - oy) / sy - 0.5 + 1e-9), -1, ny - 1).astype(np.int64)
    k0 = np.clip(np.ceil((zmin - oz) / sz - 0.5 - 1e-9), 0, nz).astype(np.int64)
    k1 = np.clip(np.floor((zmax - oz) / sz - 0.5 + 1e-9), -1, nz - 1).astype(np.int64)
    cy = np.maximum(j1 - j0 + 1, 0)
    cz = np.maximum(k1 - k0 + 1, 0)
    counts = cy * cz
    t_idx = np.repeat(np.arange(len(tri)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    jj = j0[t_idx] + local // cz[t_idx]
    kk = k0[t_idx] + local % cz[t_idx]
    qy = oy + (jj + 0.5) * sy
    qz = oz + (kk + 0.5) * sz

    hit, near, xc = _hits(tri[t_idx], qy, qz, scale)
    col = jj * nz + kk
    ambiguous = np.zeros(ny * nz, dtype=bool)
    ambiguous[col[near]] = True

    # voxel i lies left of crossing x when i < m
    xh = xc[hit]
    ch = col[hit]
    on_surface = np.abs((xh - ox) / sx - 0.5 - np.round((xh - ox) / sx - 0.5)) * sx <= _EDGE_TOL * scale
    ambiguous[ch[on_surface]] = True
    m = np.clip(np.ceil((xh - ox) / sx - 0.5), 0, nx).astype(np.int64)
    toggles = np.zeros((ny * nz, nx + 1), dtype=np.int64)
    np.add.at(toggles, (ch, m), 1)
    # crossings right of voxel i: sum over m > i
    right = np.cumsum(toggles[:, ::-1], axis=1)[:, ::-1][:, 1:]
    parity = (right % 2 == 1)

    rng = np.random.default_rng(seed)
    todo = np.flatnonzero(ambiguous)
    base_y = oy + (todo // nz + 0.5) * sy
    base_z = oz + (todo % nz + 0.5) * sz
    for attempt in range(_MAX_RECASTS):
        if len(todo) == 0:
            break
        amp = 1e-6 * (10.0 ** (attempt / 4))
        jy = base_y + amp * sy * rng.uniform(-1, 1, len(todo))
        jz = base_z + amp * sz * rng.uniform(-1, 1, len(todo))
        jx = xs + amp * sx * rng.uniform(-1, 1)
        ins, amb = _column_parity(tri, jy, jz, jx, scale)
        parity[todo[~amb]] = ins[~amb]
        todo, base_y, base_z = todo[amb], base_y[amb], base_z[amb]
    if len(todo):
        raise FFDError(f"{len(todo)} voxel columns stayed ambiguous after re-casting")

    out = parity.reshape(ny, nz, nx).transpose(2, 0, 1).astype(np.float64)
    return OccupancyGrid(out, spec.spacing, spec.origin)


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def write_grid(grid: OccupancyGrid, path) -> None:
    path = Path(path)
    if grid.is_binary:
        dtype, raw = "uint8", grid.values.astype("u1")
    else:
        dtype, raw = "float32", grid.values.astype("<f4")
    path.write_bytes(raw.tobytes(order="F"))
    meta = {
        "dims": list(grid.dims),
        "spacing": grid.spacing.tolist(),
        "origin": grid.origin.tolist(),
        "dtype": dtype,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=1) + "\n")


def read_grid(path) -> OccupancyGrid:
    path = Path(path)
    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text())
        dims = tuple(int(d) for d in meta["dims"])
        spacing = [float(s) for s in meta["spacing"]]
        origin = [float(o) for o in meta["origin"]]
        dtype = meta["dtype"]
    except FileNotFoundError:
        raise ParseError(f"missing sidecar {side.name}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{side.name}: malformed sidecar ({exc})") from None
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3 or min(dims) < 1:
        raise ParseError(f"{side.name}: dims/spacing/origin must have 3 entries")
    np_dtype = {"uint8": np.dtype("u1"), "float32": np.dtype("<f4")}.get(dtype)
    if np_dtype is None:
        raise ParseError(f"{side.name}: unsupported dtype {dtype!r}")
    raw = path.read_bytes()
    expected = int(np.prod(dims)) * np_dtype.itemsize
    if len(raw) != expected:
        raise ShapeMismatchError(
            f"{path.name} holds {len(raw)} bytes; dims {list(dims)} x {dtype} need {expected}"
        )
    values = np.frombuffer(raw, dtype=np_dtype).reshape(dims, order="F").astype(np.float64)
    return OccupancyGrid(values, spacing, origin)
