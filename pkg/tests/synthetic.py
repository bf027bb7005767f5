"""Self-generated fitting targets with known ground truth."""

import numpy as np

from ffdfit.ffd import assemble_tensor, build_lattice
from ffdfit.shapes import icosphere


def warp(seed, radius=25.0, fraction=0.05):
    """2562-vertex sphere and its image under random 6^3 control displacements.

    Each control moves in a random direction by at most ``fraction`` of the
    lattice domain diagonal.
    """
    s = icosphere(4, radius)
    lat = build_lattice(s, 6)
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(lat.n_controls, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d *= rng.uniform(0, 1, (lat.n_controls, 1)) * fraction * lat.diagonal
    T = assemble_tensor(s.vertices, lat)
    return s, s.vertices + T.matrix @ d
