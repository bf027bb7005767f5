"""Trivariate cubic B-spline free-form deformation.

A :class:`ControlLattice` spans an axis-aligned box with an open-uniform
(clamped) knot vector per axis. Control rest positions sit at the Greville
abscissae, so zero displacement is the identity map and the tensor reproduces
linear functions exactly. Points are deformed in displacement form::

    V = V0 + B @ dP

where ``B`` is the sparse (N, psi) matrix of basis products assembled once per
point set (:func:`assemble_tensor`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, FFDError, ParseError, ShapeMismatchError

DEGREE = 3
_ORDER = DEGREE + 1
_DOMAIN_TOL = 1e-12


def open_uniform_knots(n_ctrl: int, degree: int = DEGREE) -> np.ndarray:
    """Clamped knot vector on [0, 1] for ``n_ctrl`` controls."""
    if n_ctrl < degree + 1:
        raise FFDError(f"need at least {degree + 1} controls per axis, got {n_ctrl}")
    n_spans = n_ctrl - degree
    interior = np.arange(1, n_spans) / n_spans
    return np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])


def greville(knots: np.ndarray, degree: int = DEGREE) -> np.ndarray:
    """Knot averages ``(t[i+1] + ... + t[i+degree]) / degree``."""
    knots = np.asarray(knots, dtype=np.float64)
    n_ctrl = len(knots) - degree - 1
    return np.array([knots[i + 1:i + degree + 1].sum() / degree for i in range(n_ctrl)])


def find_span(u, knots: np.ndarray, degree: int = DEGREE):
    """Knot span index ``k`` with ``t[k] <= u < t[k+1]``; ``u == 1`` maps to the last span."""
    n_ctrl = len(knots) - degree - 1
    k = np.searchsorted(knots, u, side="right") - 1
    return np.clip(k, degree, n_ctrl - 1)


def basis_funs(u, knots: np.ndarray, degree: int = DEGREE):
    """Nonzero basis values at ``u`` (scalar or array).

    Returns ``(span, weights)`` where ``weights[..., r]`` is the value of basis
    function ``span - degree + r``. Uses the triangular Cox-de Boor scheme,
    vectorized over ``u``.
    """
    u = np.asarray(u, dtype=np.float64)
    span = find_span(u, knots, degree)
    left = np.empty(u.shape + (degree + 1,))
    right = np.empty(u.shape + (degree + 1,))
    N = np.zeros(u.shape + (degree + 1,))
    N[..., 0] = 1.0
    for j in range(1, degree + 1):
        left[..., j] = u - knots[span + 1 - j]
        right[..., j] = knots[span + j] - u
        saved = np.zeros(u.shape)
        for r in range(j):
            denom = right[..., r + 1] + left[..., j - r]
            temp = N[..., r] / denom
            N[..., r] = saved + right[..., r + 1] * temp
            saved = left[..., j - r] * temp
        N[..., j] = saved
    return span, N


def eval_basis(u: float, knots: np.ndarray):
    """Cubic basis at one parameter value: ``(span, 4 weights)``.

    The weights belong to controls ``span - 3 .. span``.
    """
    u = float(u)
    if not (-_DOMAIN_TOL <= u <= 1.0 + _DOMAIN_TOL):
        raise DomainError(f"parameter {u!r} outside [0, 1]")
    u = min(max(u, 0.0), 1.0)
    span, w = basis_funs(u, np.asarray(knots, dtype=np.float64))
    return int(span), w


@dataclass
class ControlLattice:
    """Control grid of ``dims`` points over the box ``[lo, hi]``.

    Attributes
    ----------
    dims : tuple of int
        Control count per axis (each >= 4).
    lo, hi : ndarray of shape (3,)
        Corners of the parameter domain in mm.
    displacements : ndarray of shape (psi, 3)
        Control displacements, flattened with the z index varying fastest.
    """

    dims: tuple[int, int, int]
    lo: np.ndarray
    hi: np.ndarray
    displacements: np.ndarray = None
    knots: tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < _ORDER:
            raise FFDError(f"lattice dims must be three values >= {_ORDER}, got {self.dims}")
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(self.hi - self.lo <= 0):
            raise DomainError(f"degenerate lattice domain {self.lo} .. {self.hi}")
        self.knots = tuple(open_uniform_knots(d) for d in self.dims)
        if self.displacements is None:
            self.displacements = np.zeros((self.n_controls, 3))
        else:
            self.displacements = np.array(self.displacements, dtype=np.float64).reshape(-1, 3)
            if len(self.displacements) != self.n_controls:
                raise ShapeMismatchError(
                    f"{len(self.displacements)} displacements for {self.n_controls} controls"
                )

    @property
    def n_controls(self) -> int:
        return int(np.prod(self.dims))

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    @property
    def spacing(self) -> np.ndarray:
        """Mean distance between neighbouring controls per axis."""
        return self.extent / (np.asarray(self.dims) - 1)

    def greville_params(self) -> tuple[np.ndarray, ...]:
        return tuple(greville(k) for k in self.knots)

    def param_grid(self) -> np.ndarray:
        """(psi, 3) normalized coordinates of the controls."""
        gx, gy, gz = self.greville_params()
        g = np.stack(np.meshgrid(gx, gy, gz, indexing="ij"), axis=-1)
        return g.reshape(-1, 3)

    @property
    def rest_positions(self) -> np.ndarray:
        return self.lo + self.param_grid() * self.extent

    @property
    def positions(self) -> np.ndarray:
        return self.rest_positions + self.displacements

    def flat_index(self, i, j, k):
        return (np.asarray(i) * self.dims[1] + np.asarray(j)) * self.dims[2] + np.asarray(k)

    def same_domain(self, other: "ControlLattice", rtol: float = 1e-12) -> bool:
        scale = max(self.diagonal, other.diagonal)
        return bool(
            np.all(np.abs(self.lo - other.lo) <= rtol * scale)
            and np.all(np.abs(self.hi - other.hi) <= rtol * scale)
        )

    def copy(self) -> "ControlLattice":
        return ControlLattice(self.dims, self.lo.copy(), self.hi.copy(), self.displacements.copy())

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "displacements": self.displacements.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ControlLattice":
        try:
            return cls(tuple(d["dims"]), d["lo"], d["hi"], d.get("displacements"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed lattice record: {exc}") from None


def bounding_domain(points: np.ndarray, padding_fraction: float = 0.05):
    """Bounding box of ``points`` grown by ``padding_fraction`` of its extent per side."""
    points = np.asarray(points, dtype=np.float64)
    if padding_fraction < 0:
        raise FFDError("padding_fraction must be >= 0")
    lo, hi = points.min(0), points.max(0)
    ext = hi - lo
    if np.any(ext <= 0):
        raise DomainError(f"bounding box has zero extent on an axis: {ext.tolist()}")
    return lo - padding_fraction * ext, hi + padding_fraction * ext


def build_lattice(mesh, dims, padding_fraction: float = 0.05) -> ControlLattice:
    """Zero-displacement lattice over the padded bounding box of ``mesh``.

    ``mesh`` may be a :class:`~ffdfit.mesh_io.TemplateMesh` or an (N, 3) array.
    """
    pts = getattr(mesh, "vertices", mesh)
    lo, hi = bounding_domain(pts, padding_fraction)
    if np.isscalar(dims):
        dims = (dims,) * 3
    return ControlLattice(tuple(dims), lo, hi)


@dataclass
class DeformationTensor:
    """Sparse (N, psi) matrix of trivariate basis products.

    ``matrix`` is a canonical CSR matrix (sorted column indices, no explicit
    zeros). ``params`` keeps each point's normalized (s, t, u) coordinates.
    """

    matrix: sp.csr_matrix
    params: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def normalize_points(points: np.ndarray, lattice: ControlLattice) -> np.ndarray:
    """Map points into [0, 1]^3; raises on points outside the domain."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    s = (points - lattice.lo) / lattice.extent
    bad = np.flatnonzero(((s < -_DOMAIN_TOL) | (s > 1 + _DOMAIN_TOL)).any(1))
    if len(bad):
        i = int(bad[0])
        raise DomainError(
            f"point {i} at {points[i].tolist()} is outside the lattice domain "
            f"{lattice.lo.tolist()} .. {lattice.hi.tolist()} ({len(bad)} points outside)"
        )
    return np.clip(s, 0.0, 1.0)


def assemble_tensor(points: np.ndarray, lattice: ControlLattice) -> DeformationTensor:
    """Assemble the sparse deformation tensor for ``points`` on ``lattice``."""
    s = normalize_points(points, lattice)
    n = len(s)
    spans, weights = [], []
    for ax in range(3):
        span, w = basis_funs(s[:, ax], lattice.knots[ax])
        spans.append(span - DEGREE)
        weights.append(w)
    r = np.arange(_ORDER)
    ix = spans[0][:, None] + r  # (n, 4)
    iy = spans[1][:, None] + r
    iz = spans[2][:, None] + r
    ny, nz = lattice.dims[1], lattice.dims[2]
    cols = ((ix[:, :, None, None] * ny + iy[:, None, :, None]) * nz + iz[:, None, None, :])
    vals = (weights[0][:, :, None, None] * weights[1][:, None, :, None]
            * weights[2][:, None, None, :])
    # column order within a row is already ascending (x, then y, then z).
    cols = cols.reshape(n, -1)
    vals = vals.reshape(n, -1)
    indptr = np.arange(n + 1, dtype=np.int64) * (_ORDER ** 3)
    m = sp.csr_matrix((vals.ravel(), cols.ravel(), indptr), shape=(n, lattice.n_controls))
    m.eliminate_zeros()
    m.has_sorted_indices = True
    return DeformationTensor(m, s)


def apply_ffd(tensor: DeformationTensor, lattice: ControlLattice,
              points: np.ndarray | None = None) -> np.ndarray:
    """Deformed positions ``points + B @ displacements``.

    Without ``points`` the undeformed positions are recovered from the
    normalized coordinates stored in the tensor.
    """
    if tensor.cols != lattice.n_controls:
        raise ShapeMismatchError(
            f"tensor has {tensor.cols} columns but lattice has {lattice.n_controls} controls"
        )
    if points is None:
        if tensor.params is None:
            raise FFDError("tensor carries no point coordinates; pass points explicitly")
        points = lattice.lo + tensor.params * lattice.extent
    points = np.asarray(points, dtype=np.float64)
    if len(points) != tensor.rows:
        raise ShapeMismatchError(f"tensor has {tensor.rows} rows but {len(points)} points given")
    return points + tensor.matrix @ lattice.displacements


def apply_absolute(tensor: DeformationTensor, lattice: ControlLattice) -> np.ndarray:
    """``B @ P`` with absolute control positions."""
    if tensor.cols != lattice.n_controls:
        raise ShapeMismatchError(
            f"tensor has {tensor.cols} columns but lattice has {lattice.n_controls} controls"
        )
    return tensor.matrix @ lattice.positions


def trilinear(values: np.ndarray, axes: tuple[np.ndarray, ...], query: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of ``values`` (nx, ny, nz, C) sampled on the
    rectilinear grid ``axes`` at ``query`` points (M, 3)."""
    out = np.zeros((len(query), values.shape[-1]))
    idx, frac = [], []
    for ax, grid in enumerate(axes):
        q = query[:, ax]
        i = np.clip(np.searchsorted(grid, q, side="right") - 1, 0, len(grid) - 2)
        idx.append(i)
        frac.append((q - grid[i]) / (grid[i + 1] - grid[i]))
    for dx in (0, 1):
        wx = frac[0] if dx else 1 - frac[0]
        for dy in (0, 1):
            wy = frac[1] if dy else 1 - frac[1]
            for dz in (0, 1):
                wz = frac[2] if dz else 1 - frac[2]
                out += (wx * wy * wz)[:, None] * values[idx[0] + dx, idx[1] + dy, idx[2] + dz]
    return out


def upsample_displacements(coarse: ControlLattice, fine: ControlLattice) -> np.ndarray:
    """Displacements for ``fine`` by trilinear interpolation of the coarse field.

    Both lattices are located by their normalized (Greville) coordinates, so a
    coarse field that is linear in position stays linear, and the fine FFD then
    reproduces the coarse deformation exactly.
    """
    if not coarse.same_domain(fine):
        raise DomainError("coarse and fine lattices must share the same domain")
    coarse_field = coarse.displacements.reshape(*coarse.dims, 3)
    return trilinear(coarse_field, coarse.greville_params(), fine.param_grid())


# --- binary CSR format -------------------------------------------------------
# header: rows, cols, nnz as uint64 LE; then indptr (int64[rows+1]),
# indices (int64[nnz]), data (float64[nnz]), all little-endian.

_MAGIC = b"FFDCSR1\0"


def save_tensor(tensor, path) -> None:
    m = tensor.matrix if isinstance(tensor, DeformationTensor) else sp.csr_matrix(tensor)
    m = m.tocsr()
    m.sort_indices()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQQ", m.shape[0], m.shape[1], m.nnz))
        fh.write(m.indptr.astype("<i8").tobytes())
        fh.write(m.indices.astype("<i8").tobytes())
        fh.write(m.data.astype("<f8").tobytes())


def load_tensor(path) -> DeformationTensor:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC) or len(data) < len(_MAGIC) + 24:
        raise ParseError("not a tensor file (bad magic or short header)", offset=0)
    rows, cols, nnz = struct.unpack_from("<QQQ", data, len(_MAGIC))
    pos = len(_MAGIC) + 24
    need = pos + 8 * (rows + 1) + 16 * nnz
    if len(data) != need:
        raise ParseError(f"tensor file is {len(data)} bytes, header implies {need}", offset=pos)
    indptr = np.frombuffer(data, "<i8", rows + 1, pos).astype(np.int64)
    pos += 8 * (rows + 1)
    indices = np.frombuffer(data, "<i8", nnz, pos).astype(np.int64)
    pos += 8 * nnz
    vals = np.frombuffer(data, "<f8", nnz, pos).astype(np.float64)
    if indptr[0] != 0 or indptr[-1] != nnz or np.any(np.diff(indptr) < 0):
        raise ParseError("inconsistent row pointer array", offset=len(_MAGIC) + 24)
    if nnz and (indices.min() < 0 or indices.max() >= cols):
        raise ParseError("column index out of range")
    return DeformationTensor(sp.csr_matrix((vals, indices, indptr), shape=(rows, cols)))
