"""Multi-resolution B-spline free-form deformation for template mesh fitting.

A template surface mesh is deformed by three cubic B-spline control lattices
of increasing resolution so that it matches target point sets, while keeping
the template's connectivity.
"""

__version__ = "0.1.0"

from .errors import FFDError
from .ffd import (
    ControlLattice,
    DeformationTensor,
    apply_ffd,
    assemble_tensor,
    build_lattice,
    upsample_displacements,
)
from .fit import FitConfig, FitResult, fit_block, fit_cascade, fit_sequence
from .grid_graph import ChebyshevFilter, build_grid_graph, chebyshev_filter, scaled_laplacian
from .mesh_io import MeshSequence, TemplateMesh, load_mesh, load_sequence, save_mesh, save_sequence
from .metrics import EvalReport, dice_jaccard, evaluate, surface_distances
from .objective import LossWeights, ObjectiveReport, chamfer_loss, elasticity_loss, seg_loss, total_loss
from .postproc import fit_plane, interpolate_sequence, project_caps
from .sampler import SampleSet, draw_samples, field_expectation
from .voxel import GridSpec, OccupancyGrid, voxelize

__all__ = [
    "__version__",
    "FFDError",
    "ControlLattice", "DeformationTensor", "apply_ffd", "assemble_tensor", "build_lattice",
    "upsample_displacements",
    "FitConfig", "FitResult", "fit_block", "fit_cascade", "fit_sequence",
    "ChebyshevFilter", "build_grid_graph", "chebyshev_filter", "scaled_laplacian",
    "MeshSequence", "TemplateMesh", "load_mesh", "load_sequence", "save_mesh", "save_sequence",
    "EvalReport", "dice_jaccard", "evaluate", "surface_distances",
    "LossWeights", "ObjectiveReport", "chamfer_loss", "elasticity_loss", "seg_loss", "total_loss",
    "fit_plane", "interpolate_sequence", "project_caps",
    "SampleSet", "draw_samples", "field_expectation",
    "GridSpec", "OccupancyGrid", "voxelize",
]
