"""Coarse-to-fine template fitting by direct optimization of control displacements.

Three deformation blocks run in sequence on lattices of increasing resolution
(6^3, 12^3, 16^3 by default). Each block minimizes

    chamfer(template + B @ dP, target) + alpha1 * elasticity(dP)

over its own displacements ``dP`` with a first-order method; the next block
starts from a trilinear upsampling of the previous block's displacements. The
segmentation loss is evaluated periodically on the voxelized current mesh and
logged, but it does not drive the updates.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, DivergenceError, FFDError, StructureMismatchError, WatertightError
from .ffd import ControlLattice, DeformationTensor, assemble_tensor, build_lattice, upsample_displacements
from .grid_graph import build_grid_graph, scaled_laplacian, smooth_update
from .mesh_io import TemplateMesh
from .objective import (
    LossWeights,
    NearestNeighbors,
    ObjectiveReport,
    chamfer_pair,
    elasticity_loss,
    seg_loss,
    total_loss,
)
from .sampler import draw_samples, field_expectation
from .voxel import GridSpec, check_watertight, voxelize

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam_like", "plain_gd")

# Elasticity weight used by the fitter. See README ("Loss weighting").
FIT_ALPHA1 = 0.1


@dataclass
class FitConfig:
    """Settings for a three-block fit.

    ``step_size`` is a fraction of the lattice domain diagonal: the Adam
    learning rate in mm, or the largest control move of a plain gradient step.
    The Adam rate follows a cosine decay to ``final_step_fraction`` of its
    initial value over each block.

    ``block_alpha1_scale`` multiplies the elasticity weight per block: the
    coarse block is kept close to rigid so that later, finer blocks only
    refine a globally aligned mesh. With ``align_centroids`` the first block
    starts with a uniform shift that moves the centroid of the deformed
    template onto the centroid of the target points.
    """

    block_dims: tuple = ((6, 6, 6), (12, 12, 12), (16, 16, 16))
    iters_per_block: int = 300
    step_size: float = 1e-2
    optimizer: str = "adam_like"
    weights: LossWeights = field(default_factory=lambda: LossWeights(alpha1=FIT_ALPHA1))
    block_alpha1_scale: tuple = (100.0, 1.0, 1.0)
    align_centroids: bool = True
    sampler_seed: int = 0
    sampler_k: int = 16
    smoothing: float = 0.0
    convergence_tol: float = 1e-6
    convergence_window: int = 10
    padding_fraction: float = 0.05
    final_step_fraction: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-12
    max_backtracks: int = 20
    trust_growth: float = 1.2
    seg_every: int = 25
    seg_grid_dims: tuple = (32, 32, 32)
    divergence_factor: float = 10.0
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.weights, Mapping):
            self.weights = LossWeights(**{"alpha1": FIT_ALPHA1, **self.weights})
        self.block_dims = tuple(
            tuple(int(x) for x in ((d,) * 3 if np.isscalar(d) else d)) for d in self.block_dims
        )
        self.seg_grid_dims = tuple(int(x) for x in self.seg_grid_dims)
        self.block_alpha1_scale = tuple(float(x) for x in self.block_alpha1_scale)
        if len(self.block_alpha1_scale) != 3 or min(self.block_alpha1_scale) < 0:
            raise ConfigError("block_alpha1_scale needs 3 nonnegative factors")
        if len(self.block_dims) != 3:
            raise ConfigError(f"need exactly 3 deformation blocks, got {len(self.block_dims)}")
        for a, b in zip(self.block_dims, self.block_dims[1:]):
            if any(y < x for x, y in zip(a, b)):
                raise ConfigError(f"block dims must be non-decreasing: {a} then {b}")
        if min(min(d) for d in self.block_dims) < 4:
            raise ConfigError("every block needs at least 4 controls per axis")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.iters_per_block < 1 or self.step_size <= 0:
            raise ConfigError("iters_per_block and step_size must be positive")
        if not 0.0 <= self.smoothing <= 1.0:
            raise ConfigError("smoothing must lie in [0, 1]")
        if not self.divergence_factor > 1:
            raise ConfigError("divergence_factor must exceed 1")
        if self.convergence_window < 1 or self.seg_every < 1:
            raise ConfigError("convergence_window and seg_every must be >= 1")

    def for_block(self, b: int) -> "FitConfig":
        """Copy whose elasticity weight is the one used by block ``b``."""
        w = replace(self.weights, alpha1=self.weights.alpha1 * self.block_alpha1_scale[b])
        return replace(self, weights=w, block_alpha1_scale=(1.0, 1.0, 1.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_dims"] = [list(b) for b in self.block_dims]
        d["block_alpha1_scale"] = list(self.block_alpha1_scale)
        d["seg_grid_dims"] = list(self.seg_grid_dims)
        return d


@dataclass
class BlockState:
    lattice: ControlLattice
    tensor: DeformationTensor
    reports: list
    initial_objective: float
    final_objective: float
    iterations: int
    point_loss: float
    grid_loss: float
    diagnostics: dict = field(default_factory=dict)


@dataclass
class FitResult:
    lattices: list
    mesh: TemplateMesh
    log: list
    wall_time: float
    blocks: list = field(default_factory=list)
    report: ObjectiveReport | None = None

    def log_lines(self) -> list[str]:
        return [r.to_json() for r in self.log]

    def summary(self) -> dict:
        return {
            "blocks": [
                {
                    "dims": list(b.lattice.dims),
                    "iterations": b.iterations,
                    "initial_objective": b.initial_objective,
                    "final_objective": b.final_objective,
                    "point_loss": b.point_loss,
                    "grid_loss": b.grid_loss,
                    "diagnostics": b.diagnostics,
                }
                for b in self.blocks
            ],
            "final": self.report.to_record() if self.report else None,
        }


class _Problem:
    """Chamfer + elasticity objective for one block, with cached target trees."""

    def __init__(self, points0, groups, targets, tensor, alpha1, workers):
        self.points0 = points0
        self.groups = groups
        self.targets = targets
        self.trees = {k: NearestNeighbors(targets[k], workers) for k in groups}
        self.B = tensor.matrix
        self.BT = tensor.matrix.T.tocsr()
        self.alpha1 = alpha1
        self.workers = workers

    def deformed(self, disp):
        return self.points0 + self.B @ disp

    def __call__(self, disp):
        V = self.deformed(disp)
        grad_v = np.zeros_like(V)
        point = 0.0
        per = {}
        for key in sorted(self.groups):
            ids = self.groups[key]
            loss, g = chamfer_pair(V[ids], self.targets[key], self.trees[key], self.workers)
            grad_v[ids] += g  # ids are unique within a structure
            point += loss
            per[str(key)] = loss
        grid, g_grid = elasticity_loss(disp)
        grad = self.BT @ grad_v + self.alpha1 * g_grid
        return point, grid, per, grad


def _structure_groups(template: TemplateMesh) -> dict:
    return {lab: template.structure_vertex_ids(lab) for lab in range(template.n_structures)}


def _as_target_dict(target, n_structures) -> dict:
    if isinstance(target, TemplateMesh):
        return {lab: target.vertices[target.structure_vertex_ids(lab)]
                for lab in range(target.n_structures)}
    if isinstance(target, Mapping):
        return {int(k): np.asarray(v, dtype=np.float64).reshape(-1, 3) for k, v in target.items()}
    if isinstance(target, np.ndarray) and target.ndim == 2:
        return {0: np.asarray(target, dtype=np.float64)}
    return {i: np.asarray(v, dtype=np.float64).reshape(-1, 3) for i, v in enumerate(target)}


def _check_structures(groups, targets):
    if set(groups) != set(targets):
        raise StructureMismatchError(
            f"template structures {sorted(groups)} != target structures {sorted(targets)}"
        )
    for k, t in targets.items():
        if len(t) == 0:
            raise StructureMismatchError(f"target structure {k} is empty")
        if not np.isfinite(t).all():
            raise FFDError(f"target structure {k} has non-finite coordinates", code="non-finite")


class SegMonitor:
    """Segmentation loss of the voxelized deformed template against a fixed truth grid."""

    def __init__(self, template: TemplateMesh, truth: TemplateMesh, grid_dims):
        check_watertight(template)
        self.template = template
        pts = np.vstack([template.vertices, truth.vertices])
        self.spec = GridSpec.covering(pts, grid_dims, padding_fraction=0.15)
        self.truth = voxelize(truth, self.spec)

    def __call__(self, vertices: np.ndarray) -> float:
        pred = voxelize(self.template.with_vertices(vertices), self.spec)
        return seg_loss(pred, self.truth)


def fit_block(template_points: np.ndarray, targets, lattice: ControlLattice, config: FitConfig,
              iteration_offset: int = 0, groups: dict | None = None,
              tensor: DeformationTensor | None = None,
              seg_monitor: Callable[[np.ndarray], float] | None = None,
              block_index: int | None = None) -> BlockState:
    """Optimize ``lattice.displacements`` for one deformation block.

    ``targets`` maps structure id to target points and ``groups`` maps the same
    ids to template vertex ids (default: every vertex in one structure 0).
    The lattice is updated in place with the best iterate found, so the final
    objective never exceeds the initial one.
    """
    points0 = np.asarray(template_points, dtype=np.float64)
    targets = _as_target_dict(targets, None)
    if groups is None:
        groups = {0: np.arange(len(points0))}
    _check_structures(groups, targets)
    if tensor is None:
        tensor = assemble_tensor(points0, lattice)
    w = config.weights
    problem = _Problem(points0, groups, targets, tensor, w.alpha1, config.workers)
    lap = None
    if config.smoothing > 0:
        lap = scaled_laplacian(build_grid_graph(lattice.dims))

    disp = lattice.displacements.copy()
    lr0 = config.step_size * lattice.diagonal
    m = np.zeros_like(disp)
    v = np.zeros_like(disp)
    trust = 1.0
    t_adam = 0
    b1, b2 = config.adam_beta1, config.adam_beta2

    reports = []
    seg = 0.0
    best = None
    history = []
    n_iter = config.iters_per_block
    it = 0
    point, grid, per, grad = problem(disp)
    obj = point + w.alpha1 * grid
    initial = obj
    best = (obj, disp.copy(), point, grid)
    for it in range(n_iter + 1):
        if seg_monitor is not None and it % config.seg_every == 0:
            seg = float(seg_monitor(problem.deformed(disp)))
        gi = iteration_offset + it
        a2 = w.alpha2(gi)
        reports.append(ObjectiveReport(
            point, grid, seg, point + w.alpha1 * grid + a2 * seg,
            per_structure=dict(per), gradient=None, iteration=gi, alpha2=a2, block=block_index,
        ))
        if not np.isfinite(obj) or obj > config.divergence_factor * max(initial, 1e-300):
            raise DivergenceError(
                f"block {block_index}: objective {obj:.6g} exceeded "
                f"{config.divergence_factor:g}x its initial value {initial:.6g} at iteration {it}"
            )
        if obj < best[0]:
            best = (obj, disp.copy(), point, grid)
        history.append(obj)
        if it == n_iter:
            break
        k = config.convergence_window
        if len(history) > k and history[-k - 1] > 0:
            rel = abs(history[-k - 1] - history[-1]) / history[-k - 1]
            if rel < config.convergence_tol * k:
                break

        if config.optimizer == "adam_like":
            frac = config.final_step_fraction
            lr = lr0 * (frac + (1 - frac) * 0.5 * (1 + np.cos(np.pi * it / n_iter)))
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            t_adam += 1
            mhat = m / (1 - b1 ** t_adam)
            vhat = v / (1 - b2 ** t_adam)
            direction = mhat / (np.sqrt(vhat) + config.adam_eps)
            if lap is not None:
                direction = smooth_update(direction, lap, config.smoothing)
            # backtrack on the step scale until the objective does not increase
            accepted = False
            for _ in range(config.max_backtracks):
                trial = disp - (trust * lr) * direction
                t_point, t_grid, t_per, t_grad = problem(trial)
                t_obj = t_point + w.alpha1 * t_grid
                if t_obj <= obj:
                    accepted = True
                    break
                trust *= 0.5
            if not accepted:
                if t_adam == 1:
                    break  # not even a fresh gradient-sign step descends
                # stale momentum: restart the moment estimates
                m[:] = 0.0
                v[:] = 0.0
                t_adam = 0
                trust = 1.0
                continue
            trust = min(1.0, trust * config.trust_growth)
            disp, point, grid, per, grad, obj = trial, t_point, t_grid, t_per, t_grad, t_obj
        else:
            disp, point, grid, per, grad, obj = _gd_step(problem, disp, obj, grad, lr0, lap,
                                                         config.smoothing, w.alpha1)

    final_obj, final_disp, fpoint, fgrid = best
    lattice.displacements = final_disp
    last = reports[-1]
    if last.point_loss != fpoint or last.grid_loss != fgrid:
        # record the state that is actually returned
        point, grid, per, _ = problem(final_disp)
        gi = iteration_offset + it
        reports.append(ObjectiveReport(point, grid, seg, point + w.alpha1 * grid + w.alpha2(gi) * seg,
                                       per_structure=dict(per), iteration=gi,
                                       alpha2=w.alpha2(gi), block=block_index))
    reports[-1].gradient = problem(final_disp)[3]
    return BlockState(lattice, tensor, reports, initial, final_obj, it, fpoint, fgrid)


def _gd_step(problem, disp, obj, grad, max_move, lap, smoothing, alpha1):
    """Gradient step scaled to move no control farther than ``max_move``, halved until it descends."""
    direction = grad if lap is None else smooth_update(grad, lap, smoothing)
    gmax = float(np.linalg.norm(direction, axis=1).max())
    if gmax == 0:
        point, grid, per, g = problem(disp)
        return disp, point, grid, per, g, obj
    t = max_move / gmax
    for _ in range(30):
        trial = disp - t * direction
        point, grid, per, g = problem(trial)
        new = point + alpha1 * grid
        if new < obj:
            return trial, point, grid, per, g, new
        t *= 0.5
    point, grid, per, g = problem(disp)
    return disp, point, grid, per, g, obj


def _block_diagnostics(template_points, deformed, lattice, targets, groups, config, tensor):
    """Sampler diagnostic: expected point-to-target distance around each control."""
    samples = draw_samples(template_points, lattice, config.sampler_k, config.sampler_seed)
    dist = np.zeros(len(deformed))
    for key, ids in groups.items():
        d, _ = NearestNeighbors(targets[key]).query(deformed[ids])
        dist[ids] = d
    expect = field_expectation(samples, dist)
    return {
        "sample_fallbacks": int(samples.fallback.sum()),
        "expected_distance_mean": float(expect.mean()),
        "expected_distance_max": float(expect.max()),
    }


def _centroid_shift(points, targets, groups) -> np.ndarray:
    src = np.concatenate([points[groups[k]] for k in sorted(groups)])
    dst = np.concatenate([targets[k] for k in sorted(groups)])
    return dst.mean(axis=0) - src.mean(axis=0)


def fit_cascade(template: TemplateMesh, target, config: FitConfig | None = None,
                warm_start: list | None = None, truth_mesh: TemplateMesh | None = None) -> FitResult:
    """Run the three deformation blocks on ``template`` against ``target``.

    ``target`` is a mesh or a mapping from structure label to points. With a
    target mesh (or ``truth_mesh``) the segmentation loss is monitored.
    ``warm_start`` is the list of lattices from a previous fit of the same
    template; each block then starts from its previous solution plus the
    upsampled change of the block before it.
    """
    config = config or FitConfig()
    t_start = time.perf_counter()
    groups = _structure_groups(template)
    targets = _as_target_dict(target, template.n_structures)
    _check_structures(groups, targets)
    if truth_mesh is None and isinstance(target, TemplateMesh):
        truth_mesh = target
    monitor = None
    if truth_mesh is not None:
        try:
            monitor = SegMonitor(template, truth_mesh, config.seg_grid_dims)
        except WatertightError as exc:
            log.warning("segmentation loss not monitored: %s", exc)

    points0 = template.vertices
    lattices, blocks, full_log = [], [], []
    prev = None
    offset = 0
    for b, dims in enumerate(config.block_dims):
        lat = build_lattice(template, dims, config.padding_fraction)
        if warm_start is not None:
            lat.displacements = warm_start[b].displacements.copy()
            if prev is not None:
                change = ControlLattice(prev.dims, prev.lo, prev.hi,
                                        prev.displacements - warm_start[b - 1].displacements)
                lat.displacements += upsample_displacements(change, lat)
        elif prev is not None:
            lat.displacements = upsample_displacements(prev, lat)
        if b == 0 and config.align_centroids:
            tensor0 = assemble_tensor(points0, lat)
            lat.displacements = lat.displacements + _centroid_shift(
                points0 + tensor0.matrix @ lat.displacements, targets, groups)
        state = fit_block(points0, targets, lat, config.for_block(b), offset, groups,
                          seg_monitor=monitor, block_index=b)
        deformed = points0 + state.tensor.matrix @ lat.displacements
        state.diagnostics = _block_diagnostics(points0, deformed, lat, targets, groups, config,
                                               state.tensor)
        log.info("block %d %s: %d iterations, objective %.6g -> %.6g", b, dims,
                 state.iterations, state.initial_objective, state.final_objective)
        offset += state.iterations + 1
        full_log.extend(state.reports)
        blocks.append(state)
        lattices.append(lat)
        prev = lat

    final_vertices = points0 + blocks[-1].tensor.matrix @ lattices[-1].displacements
    seg = float(monitor(final_vertices)) if monitor is not None else 0.0
    report = total_loss([(s.point_loss, s.grid_loss) for s in blocks], seg, config.weights, offset)
    report.per_structure = dict(blocks[-1].reports[-1].per_structure)
    report.gradient = blocks[-1].reports[-1].gradient
    wall = time.perf_counter() - t_start
    return FitResult(lattices, template.with_vertices(final_vertices), full_log, wall, blocks, report)


def fit_sequence(template: TemplateMesh, targets: list, config: FitConfig | None = None,
                 truth_meshes: list | None = None) -> list[FitResult]:
    """Fit every frame; frame ``t > 0`` is warm-started from frame ``t - 1``."""
    if len(targets) < 1:
        raise FFDError("need at least one frame")
    config = config or FitConfig()
    results = []
    prev = None
    for i, tgt in enumerate(targets):
        truth = truth_meshes[i] if truth_meshes is not None else None
        res = fit_cascade(template, tgt, config,
                          warm_start=prev.lattices if prev is not None else None,
                          truth_mesh=truth)
        results.append(res)
        prev = res
    return results


def lattices_to_json(lattices: list) -> str:
    return json.dumps({"blocks": [lat.to_dict() for lat in lattices]})


def lattices_from_json(text: str) -> list:
    raw = json.loads(text)
    blocks = raw["blocks"] if isinstance(raw, dict) and "blocks" in raw else [raw]
    return [ControlLattice.from_dict(b) for b in blocks]


def config_replace(config: FitConfig, **changes) -> FitConfig:
    return replace(config, **changes)
