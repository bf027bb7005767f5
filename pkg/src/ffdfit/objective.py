"""Loss terms for template fitting and their weighted total.

* point loss: symmetric Chamfer distance (sums of squared nearest-neighbour
  distances, per structure),
* grid elasticity: squared deviation of control displacements from their mean,
* segmentation: voxelwise cross-entropy plus soft Dice on occupancy grids.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import FFDError, ShapeMismatchError, StructureMismatchError

SEG_EPS = 1e-7


@dataclass
class LossWeights:
    alpha1: float = 100.0
    alpha2_initial: float = 200.0
    alpha2_decay: float = 0.05
    alpha2_period: int = 5

    def __post_init__(self):
        if min(self.alpha1, self.alpha2_initial) < 0:
            raise FFDError("loss weights must be >= 0")
        if not 0.0 <= self.alpha2_decay < 1.0:
            raise FFDError("alpha2_decay must lie in [0, 1)")
        if self.alpha2_period < 1:
            raise FFDError("alpha2_period must be >= 1")

    def alpha2(self, iteration: int) -> float:
        """Segmentation weight after ``iteration`` outer iterations (step decay)."""
        return self.alpha2_initial * (1.0 - self.alpha2_decay) ** (int(iteration) // self.alpha2_period)


@dataclass
class ObjectiveReport:
    point_loss: float
    grid_loss: float
    seg_loss: float
    total: float
    per_structure: dict = field(default_factory=dict)
    gradient: np.ndarray | None = None
    iteration: int = 0
    alpha2: float = 0.0
    block: int | None = None

    def to_record(self) -> dict:
        rec = asdict(self)
        grad = rec.pop("gradient")
        if grad is not None:
            rec["gradient_norm"] = float(np.linalg.norm(grad))
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


class NearestNeighbors:
    """Nearest-neighbour queries against a fixed point set (k-d tree backed)."""

    def __init__(self, points: np.ndarray, workers: int = 1):
        self.points = np.asarray(points, dtype=np.float64)
        self.tree = cKDTree(self.points)
        self.workers = workers

    def query(self, x: np.ndarray):
        d, i = self.tree.query(x, k=1, workers=self.workers)
        return d, i


def _directed(src, dst_tree: NearestNeighbors):
    _, nn = dst_tree.query(src)
    diff = src - dst_tree.points[nn]
    return np.einsum("ij,ij->i", diff, diff), nn, diff


def chamfer_pair(pred: np.ndarray, target: np.ndarray, target_tree: NearestNeighbors | None = None,
                 workers: int = 1):
    """Chamfer loss of one structure and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(target) == 0:
        raise FFDError("Chamfer loss needs nonempty point sets")
    if target_tree is None:
        target_tree = NearestNeighbors(target, workers)
    d_pg, _, diff_pg = _directed(pred, target_tree)
    d_gp, nn_gp, diff_gp = _directed(target, NearestNeighbors(pred, workers))
    loss = float(d_pg.sum() + d_gp.sum())
    grad = 2.0 * diff_pg
    # target->pred term: d/dp ||g - p||^2 = 2 (p - g) for the matched p
    np.add.at(grad, nn_gp, -2.0 * diff_gp)
    return loss, grad


def _as_structures(x):
    if isinstance(x, Mapping):
        return dict(x)
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return {0: x}
    return dict(enumerate(x))


def chamfer_loss(pred_points, target_points, workers: int = 1):
    """Sum over structures of the symmetric Chamfer distance.

    Both arguments map structure id to an (n, 3) array (a bare array counts as
    a single structure). Returns ``(loss, gradients, per_structure)`` with the
    gradient of each structure's predicted points, correspondences held fixed.
    """
    P = _as_structures(pred_points)
    G = _as_structures(target_points)
    if set(P) != set(G):
        raise StructureMismatchError(
            f"structures differ: pred {sorted(P)} vs target {sorted(G)}"
        )
    if not P:
        raise FFDError("no structures given")
    total = 0.0
    grads, per = {}, {}
    for key in sorted(P):
        loss, g = chamfer_pair(P[key], G[key], workers=workers)
        total += loss
        grads[key] = g
        per[key] = loss
    return total, grads, per


def elasticity_loss(displacements: np.ndarray):
    """``sum_c ||d_c - mean(d)||^2`` and its exact gradient ``2 (d_c - mean(d))``."""
    d = np.asarray(displacements, dtype=np.float64).reshape(-1, 3)
    if len(d) == 0:
        raise FFDError("no control displacements")
    dev = d - d.mean(axis=0)
    # the mean-coupling term of the gradient vanishes because deviations sum to 0
    return float(np.einsum("ij,ij->", dev, dev)), 2.0 * dev


def seg_loss(pred, truth, eps: float = SEG_EPS) -> float:
    """Mean binary cross-entropy plus soft Dice loss between occupancy grids.

    ``pred`` and ``truth`` are :class:`~ffdfit.voxel.OccupancyGrid` objects or
    plain arrays of equal shape.
    """
    p_grid, q_grid = pred, truth
    if hasattr(p_grid, "values") and hasattr(q_grid, "values"):
        if not p_grid.same_geometry(q_grid):
            raise ShapeMismatchError("occupancy grids differ in dims, spacing or origin")
    p = np.asarray(getattr(p_grid, "values", p_grid), dtype=np.float64)
    q = np.asarray(getattr(q_grid, "values", q_grid), dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeMismatchError(f"grid shapes differ: {p.shape} vs {q.shape}")
    pc = np.clip(p, eps, 1.0 - eps)
    ce = float(np.mean(-(q * np.log(pc) + (1.0 - q) * np.log1p(-pc))))
    denom = p.sum() + q.sum()
    dice = 0.0 if denom == 0 else 1.0 - 2.0 * float((p * q).sum()) / float(denom)
    return ce + dice


def total_loss(block_reports: Sequence[tuple[float, float]], seg: float,
               weights: LossWeights, iteration: int) -> ObjectiveReport:
    """Combine per-block ``(point, grid)`` losses with the segmentation term."""
    if len(block_reports) != 3:
        raise FFDError(f"expected 3 deformation blocks, got {len(block_reports)}")
    point = math.fsum(float(b[0]) for b in block_reports)
    grid = math.fsum(float(b[1]) for b in block_reports)
    a2 = weights.alpha2(iteration)
    total = point + weights.alpha1 * grid + a2 * float(seg)
    return ObjectiveReport(point, grid, float(seg), total, iteration=int(iteration), alpha2=a2)
