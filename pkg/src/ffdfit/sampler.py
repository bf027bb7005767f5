"""Per-control-point importance sampling of surface points.

For each control point ``c`` of a lattice, ``k`` surface points are drawn with
replacement with probability proportional to
``exp(-sum_a (x_a - c_a)^2 / (2 sigma_a^2))``, where ``sigma`` is the control
spacing per axis. Coarse lattices therefore gather samples from a wider
neighbourhood than fine ones.

Every control point draws from its own generator seeded by
``(seed, control_index)``, so results do not depend on evaluation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FFDError, ParseError, ShapeMismatchError
from .ffd import ControlLattice, DeformationTensor, apply_ffd

_CHUNK = 256


@dataclass
class SampleSet:
    indices: np.ndarray          # (psi, k) surface point ids
    seed: int
    sigma: np.ndarray            # (3,) mm
    fallback: np.ndarray         # (psi,) bool, uniform sampling was used

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def to_json(self) -> str:
        return json.dumps({
            "seed": int(self.seed),
            "sigma": [float(s) for s in self.sigma],
            "k": self.k,
            "indices": self.indices.tolist(),
            "fallback": np.flatnonzero(self.fallback).tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "SampleSet":
        try:
            raw = json.loads(text)
            idx = np.asarray(raw["indices"], dtype=np.int64)
            fb = np.zeros(len(idx), dtype=bool)
            fb[np.asarray(raw.get("fallback", []), dtype=np.int64)] = True
            return cls(idx.reshape(len(idx), -1), int(raw["seed"]),
                       np.asarray(raw["sigma"], dtype=np.float64), fb)
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ParseError(f"malformed sample set: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def gaussian_weights(surface_points: np.ndarray, centers: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Unnormalized weights, shape (len(centers), len(surface_points))."""
    z = (centers[:, None, :] - surface_points[None, :, :]) / sigma
    return np.exp(-0.5 * np.einsum("ijk,ijk->ij", z, z))


def draw_samples(surface_points: np.ndarray, lattice: ControlLattice, k: int = 16,
                 seed: int = 0, sigma=None) -> SampleSet:
    """Draw ``k`` surface point indices for every control point of ``lattice``.

    Control points whose weights all underflow fall back to uniform sampling and
    are flagged in ``SampleSet.fallback``.
    """
    pts = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise FFDError("no surface points to sample from")
    if k < 1:
        raise FFDError("k must be >= 1")
    sigma = lattice.spacing if sigma is None else np.broadcast_to(
        np.asarray(sigma, dtype=np.float64), (3,))
    centers = lattice.rest_positions
    n_ctrl = len(centers)
    out = np.empty((n_ctrl, k), dtype=np.int64)
    fallback = np.zeros(n_ctrl, dtype=bool)
    for start in range(0, n_ctrl, _CHUNK):
        stop = min(start + _CHUNK, n_ctrl)
        w = gaussian_weights(pts, centers[start:stop], sigma)
        cdf = np.cumsum(w, axis=1)
        for row, c in enumerate(range(start, stop)):
            u = np.random.default_rng([seed, c]).random(k)
            total = cdf[row, -1]
            if not total > 0:
                fallback[c] = True
                out[c] = np.minimum((u * len(pts)).astype(np.int64), len(pts) - 1)
                continue
            out[c] = np.minimum(np.searchsorted(cdf[row], u * total, side="right"), len(pts) - 1)
    return SampleSet(out, int(seed), np.array(sigma, dtype=np.float64), fallback)


def update_sample_coordinates(sample_tensor: DeformationTensor, lattice: ControlLattice,
                              points: np.ndarray | None = None) -> np.ndarray:
    """Current positions of the sampled points (same contract as ``apply_ffd``)."""
    return apply_ffd(sample_tensor, lattice, points)


def field_expectation(samples: SampleSet, field_values) -> np.ndarray:
    """Mean of ``field_values`` over each control point's samples."""
    vals = np.asarray(field_values, dtype=np.float64)
    if vals.ndim == 0:
        raise ShapeMismatchError("field values must be indexed by surface point")
    top = int(samples.indices.max()) if samples.indices.size else -1
    if top >= len(vals):
        raise ShapeMismatchError(
            f"samples reference surface point {top} but only {len(vals)} field values given"
        )
    return vals[samples.indices].mean(axis=1)
