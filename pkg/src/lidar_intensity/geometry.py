"""Ball-query neighborhoods, PCA surface normals, and incidence angles.

The sensor sits at the origin of the scan frame. Normals are oriented to face
the sensor, so ``dot(normal, point) <= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError
from .scan import Scan

DEFAULT_RADIUS = 0.5
#: neighbors required before a normal is trusted for calibration
MIN_TRUSTED_NEIGHBORS = 5
_UNIT_TOL = 1e-6


class SpatialIndex:
    """Immutable radius-query index over a fixed point set."""

    def __init__(self, xyz):
        xyz = np.asarray(xyz, dtype=float)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"expected (n, 3) points, got {xyz.shape}")
        if xyz.shape[0] == 0:
            raise ContractError("cannot index an empty scan")
        self.xyz = xyz
        self.xyz.setflags(write=False)
        self._tree = cKDTree(xyz)

    def __len__(self):
        return self.xyz.shape[0]

    def query_radius(self, point, radius: float) -> np.ndarray:
        """Sorted indices of all points within ``radius`` (inclusive)."""
        idx = self._tree.query_ball_point(np.asarray(point, dtype=float), radius)
        return np.array(sorted(idx), dtype=np.intp)

    def query_radius_all(self, radius: float):
        """Neighbor lists for every indexed point, as ``(owner, neighbor)`` arrays."""
        lists = self._tree.query_ball_point(self.xyz, radius, return_sorted=True)
        counts = np.fromiter((len(l) for l in lists), dtype=np.intp, count=len(lists))
        owner = np.repeat(np.arange(len(lists)), counts)
        neighbor = (
            np.concatenate([np.asarray(l, dtype=np.intp) for l in lists])
            if counts.sum()
            else np.empty(0, dtype=np.intp)
        )
        return owner, neighbor, counts


def build_index(scan) -> SpatialIndex:
    xyz = scan.xyz if isinstance(scan, Scan) else scan
    return SpatialIndex(xyz)


def _check_unit(v, name):
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norm - 1.0) > _UNIT_TOL):
        raise ContractError(f"{name} must be a unit vector (norm {norm})")
    return v


def beam_direction(point) -> np.ndarray:
    """Unit vector(s) from the sensor origin toward ``point`` (shape ``(3,)`` or ``(n, 3)``)."""
    p = np.asarray(point, dtype=float)
    r = np.linalg.norm(p, axis=-1, keepdims=True)
    if np.any(r == 0):
        raise ContractError("beam direction undefined for a point at the sensor origin")
    return p / r


def incidence_angle(beam, normal):
    """Angle between beam and surface normal, folded into ``[0, pi/2]``.

    Accepts single vectors or stacked ``(n, 3)`` arrays; the sign of the
    normal does not matter.
    """
    beam = _check_unit(beam, "beam")
    normal = _check_unit(normal, "normal")
    cos = np.abs(np.sum(beam * normal, axis=-1))
    return np.arccos(np.clip(cos, 0.0, 1.0))


@dataclass(frozen=True)
class NormalEstimate:
    normal: np.ndarray
    neighbor_count: int
    planarity: float
    degenerate: bool


def _pca_from_moments(n, s1, s2):
    """Batched eigen-decomposition of neighborhood covariances.

    ``s1`` is ``(m, 3)`` sums of offsets, ``s2`` is ``(m, 3, 3)`` sums of outer products.
    Returns ascending eigenvalues ``(m, 3)`` and eigenvectors ``(m, 3, 3)``.
    """
    mean = s1 / n[:, None]
    cov = s2 / n[:, None, None] - mean[:, :, None] * mean[:, None, :]
    return np.linalg.eigh(cov)


def _finish(points, evals, evecs, counts, min_neighbors):
    normals = evecs[:, :, 0].copy()
    flip = np.sum(normals * points, axis=1) > 0
    normals[flip] *= -1
    lam3, lam2, lam1 = evals[:, 0], evals[:, 1], evals[:, 2]
    scale = np.maximum(lam1, np.finfo(float).tiny)
    collinear = lam2 <= 1e-10 * scale
    degenerate = (counts < min_neighbors) | collinear | (lam1 <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        planarity = np.where(degenerate, 0.0, 1.0 - np.clip(lam3, 0, None) / lam2)
    return normals, np.clip(planarity, 0.0, 1.0), degenerate


def estimate_normal(
    index: SpatialIndex, point, radius: float = DEFAULT_RADIUS, min_neighbors: int = 3
) -> NormalEstimate:
    """PCA normal of the ball neighborhood around ``point``.

    Fewer than ``min_neighbors`` neighbors, or collinear neighbors, yield a
    degenerate estimate with planarity 0 that callers must skip.
    """
    if radius <= 0:
        raise ContractError("radius must be positive")
    point = np.asarray(point, dtype=float)
    idx = index.query_radius(point, radius)
    if idx.size == 0:
        return NormalEstimate(np.array([0.0, 0.0, -1.0]), 0, 0.0, True)
    d = index.xyz[idx] - point
    n = np.array([float(idx.size)])
    evals, evecs = _pca_from_moments(n, d.sum(0)[None], (d.T @ d)[None])
    normals, planarity, degenerate = _finish(
        point[None], evals, evecs, np.array([idx.size]), min_neighbors
    )
    return NormalEstimate(normals[0], int(idx.size), float(planarity[0]), bool(degenerate[0]))


def estimate_normals(
    index: SpatialIndex, radius: float = DEFAULT_RADIUS, min_neighbors: int = MIN_TRUSTED_NEIGHBORS
):
    """Normals for every indexed point.

    Returns
    -------
    normals : (n, 3) ndarray
        Sensor-facing unit normals (meaningless where ``degenerate``).
    counts : (n,) ndarray
        Neighbor counts, including the point itself.
    planarity : (n,) ndarray
    degenerate : (n,) bool ndarray
    """
    if radius <= 0:
        raise ContractError("radius must be positive")
    xyz = index.xyz
    owner, neighbor, counts = index.query_radius_all(radius)
    d = xyz[neighbor] - xyz[owner]
    m = len(xyz)
    s1 = np.stack([np.bincount(owner, d[:, a], minlength=m) for a in range(3)], axis=1)
    s2 = np.empty((m, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s2[:, a, b] = s2[:, b, a] = np.bincount(owner, d[:, a] * d[:, b], minlength=m)
    evals, evecs = _pca_from_moments(np.maximum(counts, 1).astype(float), s1, s2)
    normals, planarity, degenerate = _finish(xyz, evals, evecs, counts, min_neighbors)
    return normals, counts, planarity, degenerate
