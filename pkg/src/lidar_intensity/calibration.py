"""Radiometric correction of raw intensity for range and incidence angle.

The corrected value ``I * R**2 / cos(alpha)`` is a reflectivity proxy: it
depends only on the surface once the ``1/R**2`` spreading loss and the
``cos(alpha)`` foreshortening are divided out. Corrections are only valid
outside the near-range zone, so everything here is gated to ``[r_min, r_max]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import geometry
from .errors import (
    ContractError,
    GateError,
    GrazingAngleError,
    SensorMismatchError,
)
from .scan import SELF_RETURN_RANGE, Scan, Sensor

ALPHA_MAX = np.radians(85.0)
DEFAULT_BIN_WIDTH = 1.0
DEFAULT_MIN_BIN_COUNT = 20
DEFAULT_PERCENTILE = 99.0


@dataclass(frozen=True)
class RangeGate:
    r_min: float = 6.0
    r_max: float = 60.0

    def __post_init__(self):
        if not 0 < self.r_min < self.r_max:
            raise ValueError(f"need 0 < r_min < r_max, got {self.r_min}, {self.r_max}")

    def contains(self, r):
        r = np.asarray(r)
        return (r >= self.r_min) & (r <= self.r_max)


DEFAULT_GATE = RangeGate()


def range_correct(intensity, range_, gate: RangeGate = DEFAULT_GATE):
    """Undo the inverse-square spreading loss: ``intensity * range**2``.

    Only defined beyond ``gate.r_min`` where the near-range efficiency is 1.
    """
    r = np.asarray(range_, dtype=float)
    if np.any(r <= gate.r_min):
        raise GateError(f"range must exceed {gate.r_min} m for range correction")
    return np.asarray(intensity, dtype=float) * r**2


def calibrate(intensity, range_, alpha, gate: RangeGate = DEFAULT_GATE, alpha_max=ALPHA_MAX):
    """Reflectivity proxy ``intensity * range**2 / cos(alpha)``.

    Scalars or broadcastable arrays. Raises :class:`GateError` for ranges
    outside the gate and :class:`GrazingAngleError` for ``alpha > alpha_max``.
    """
    i = np.asarray(intensity, dtype=float)
    r = np.asarray(range_, dtype=float)
    a = np.asarray(alpha, dtype=float)
    if np.any(i < 0):
        raise ContractError("intensity must be non-negative")
    if not np.all(gate.contains(r)):
        raise GateError(f"range outside [{gate.r_min}, {gate.r_max}] m")
    if np.any(a > alpha_max) or np.any(a < 0):
        raise GrazingAngleError(
            f"incidence angle exceeds {np.degrees(alpha_max):.1f} deg (or is negative)"
        )
    out = i * r**2 / np.cos(a)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AlphaBinTable:
    """Per-range-bin robust maximum of range-corrected intensity.

    ``edges`` has one more entry than ``robust_max`` and ``count``. Bins with
    fewer than the minimum count carry ``nan`` and are unusable.
    """

    edges: np.ndarray
    robust_max: np.ndarray
    count: np.ndarray

    def bin_of(self, r):
        idx = np.searchsorted(self.edges, r, side="right") - 1
        return np.clip(idx, 0, len(self.count) - 1)

    def to_text(self) -> str:
        lines = ["# bin_lo bin_hi robust_max count"]
        for lo, hi, m, c in zip(self.edges[:-1], self.edges[1:], self.robust_max, self.count):
            lines.append(f"{float(lo)!r} {float(hi)!r} {float(m)!r} {int(c)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AlphaBinTable":
        rows = [l.split() for l in text.splitlines() if l.strip() and not l.startswith("#")]
        lo = [float(r[0]) for r in rows]
        edges = np.array(lo + [float(rows[-1][1])])
        return cls(
            edges,
            np.array([float(r[2]) for r in rows]),
            np.array([int(r[3]) for r in rows]),
        )


def range_bins(gate: RangeGate, bin_width: float) -> np.ndarray:
    n = int(np.ceil((gate.r_max - gate.r_min) / bin_width - 1e-12))
    return gate.r_min + bin_width * np.arange(n + 1)


def build_alpha_bin_table(
    ranges,
    intensities,
    gate: RangeGate = DEFAULT_GATE,
    bin_width: float = DEFAULT_BIN_WIDTH,
    percentile: float = DEFAULT_PERCENTILE,
    min_bin_count: int = DEFAULT_MIN_BIN_COUNT,
) -> AlphaBinTable:
    r = np.asarray(ranges, dtype=float)
    corrected = np.asarray(intensities, dtype=float) * r**2
    edges = range_bins(gate, bin_width)
    table = AlphaBinTable(edges, np.empty(len(edges) - 1), np.empty(len(edges) - 1, dtype=int))
    which = table.bin_of(r)
    for k in range(len(edges) - 1):
        vals = corrected[which == k]
        table.count[k] = vals.size
        if vals.size >= max(min_bin_count, 1):
            table.robust_max[k] = np.percentile(vals, percentile)
        else:
            table.robust_max[k] = np.nan
    return table


def extract_alpha_ground_truth(
    ranges,
    intensities,
    gate: RangeGate = DEFAULT_GATE,
    bin_width: float = DEFAULT_BIN_WIDTH,
    percentile: float = DEFAULT_PERCENTILE,
    min_bin_count: int = DEFAULT_MIN_BIN_COUNT,
):
    """Incidence angles implied by each point's share of its bin maximum.

    Points of one class are binned by range; within a bin the brightest
    return is assumed to be head-on, so ``alpha = arccos(I / I_max)``.
    Intensities are compared after range correction so the inverse-square
    slope across a bin does not masquerade as obliquity.

    Returns
    -------
    alpha : ndarray
        Angles in ``[0, pi/2]``; ``nan`` for points in under-populated bins.
    table : AlphaBinTable
    """
    r = np.asarray(ranges, dtype=float)
    i = np.asarray(intensities, dtype=float)
    if not np.all(gate.contains(r)):
        raise ContractError("all points must lie inside the range gate")
    table = build_alpha_bin_table(r, i, gate, bin_width, percentile, min_bin_count)
    peak = table.robust_max[table.bin_of(r)]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(peak > 0, i * r**2 / peak, np.nan)
    alpha = np.arccos(np.clip(ratio, 0.0, 1.0))
    alpha[~np.isfinite(ratio)] = np.nan
    return alpha, table


REJECT_REASONS = ("ok", "self_return", "near_range", "far_range", "degenerate_normal", "grazing")


@dataclass(frozen=True, eq=False)
class CalibratedScan:
    """Calibration result for one scan.

    ``status`` has one code per input point (index into ``REJECT_REASONS``);
    the remaining arrays cover only the accepted points listed in ``index``.
    """

    status: np.ndarray
    index: np.ndarray
    alpha: np.ndarray
    calibrated_intensity: np.ndarray
    normals: np.ndarray

    @property
    def reject_counts(self) -> dict:
        counts = np.bincount(self.status, minlength=len(REJECT_REASONS))
        return {name: int(c) for name, c in zip(REJECT_REASONS[1:], counts[1:])}

    def __len__(self):
        return self.index.size


def alpha_features(normals, beams) -> np.ndarray:
    """Six-element regressor input: sensor-facing normal then beam direction."""
    return np.hstack([np.asarray(normals, float), np.asarray(beams, float)])


def calibrate_scan(
    scan: Scan,
    normals,
    degenerate=None,
    gate: RangeGate = DEFAULT_GATE,
    alpha_max: float = ALPHA_MAX,
    alpha_model=None,
) -> CalibratedScan:
    """Calibrate every usable point of an Ouster-style raw scan.

    ``normals`` is ``(n, 3)`` per point; ``degenerate`` marks normals to
    skip. With ``alpha_model`` (anything with ``predict`` over 6-feature
    rows) the incidence angle is predicted instead of taken from the normal.
    """
    if scan.sensor != Sensor.OUSTER_RAW:
        raise SensorMismatchError(
            "Velodyne-preprocessed intensities must be converted to raw form "
            "with sensor_transfer.convert_velodyne before calibration"
        )
    n = len(scan)
    normals = np.asarray(normals, dtype=float).reshape(n, 3)
    degenerate = np.zeros(n, bool) if degenerate is None else np.asarray(degenerate, bool)
    r = scan.range
    status = np.zeros(n, dtype=np.int8)

    def reject(mask, reason):
        status[(status == 0) & mask] = REJECT_REASONS.index(reason)

    reject(r < SELF_RETURN_RANGE, "self_return")
    reject(r < gate.r_min, "near_range")
    reject(r > gate.r_max, "far_range")
    reject(degenerate, "degenerate_normal")

    live = np.flatnonzero(status == 0)
    beams = scan.xyz[live] / r[live, None]
    if alpha_model is not None:
        alpha = np.asarray(alpha_model.predict(alpha_features(normals[live], beams)), float)
    else:
        alpha = geometry.incidence_angle(beams, normals[live])
    grazing = alpha > alpha_max
    status[live[grazing]] = REJECT_REASONS.index("grazing")
    keep = ~grazing
    index = live[keep]
    alpha = alpha[keep]
    values = scan.intensity[index] * r[index] ** 2 / np.cos(alpha)
    return CalibratedScan(status, index, alpha, values, normals[index])


class IntensityCalibrator(TransformerMixin, BaseEstimator):
    """Array front end for :func:`calibrate`.

    ``X`` columns are ``(intensity, range, alpha)``. Rows outside the gate or
    beyond ``alpha_max_deg`` become ``nan`` instead of raising.
    """

    def __init__(self, r_min=6.0, r_max=60.0, alpha_max_deg=85.0):
        self.r_min = r_min
        self.r_max = r_max
        self.alpha_max_deg = alpha_max_deg

    def fit(self, X, y=None):
        X = check_array(X)
        if X.shape[1] != 3:
            raise ValueError("expected columns (intensity, range, alpha)")
        self.gate_ = RangeGate(self.r_min, self.r_max)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "gate_")
        X = check_array(X)
        if X.shape[1] != 3:
            raise ValueError("expected columns (intensity, range, alpha)")
        i, r, a = X.T
        ok = (
            self.gate_.contains(r)
            & (a >= 0)
            & (a <= np.radians(self.alpha_max_deg))
            & (i >= 0)
        )
        out = np.full(len(X), np.nan)
        out[ok] = i[ok] * r[ok] ** 2 / np.cos(a[ok])
        return out[:, None]


@dataclass(frozen=True)
class CalibrationSettings:
    """Everything needed to turn a raw scan into calibrated points."""

    gate: RangeGate = DEFAULT_GATE
    radius: float = geometry.DEFAULT_RADIUS
    min_neighbors: int = geometry.MIN_TRUSTED_NEIGHBORS
    alpha_max: float = ALPHA_MAX
    alpha_model: object = None

    def as_dict(self) -> dict:
        return {
            "r_min": self.gate.r_min,
            "r_max": self.gate.r_max,
            "ball_radius": self.radius,
            "min_neighbors": self.min_neighbors,
            "alpha_max_deg": float(np.degrees(self.alpha_max)),
            "alpha_source": "analytic" if self.alpha_model is None else "regressor",
        }


def scan_normals(scan: Scan, settings: CalibrationSettings = CalibrationSettings()):
    """PCA normals for every point, plus the index used to find them.

    Returns ``(index, normals, degenerate)``.
    """
    index = geometry.build_index(scan)
    normals, _, _, degenerate = geometry.estimate_normals(
        index, settings.radius, settings.min_neighbors
    )
    return index, normals, degenerate


def calibrate_raw_scan(scan: Scan, settings: CalibrationSettings = CalibrationSettings()):
    """Estimate normals and calibrate in one step. Returns ``(calibrated, index)``."""
    if scan.sensor != Sensor.OUSTER_RAW:
        raise SensorMismatchError(
            "Velodyne-preprocessed intensities must be converted to raw form "
            "with sensor_transfer.convert_velodyne before calibration"
        )
    if len(scan) == 0:
        empty = np.empty(0, dtype=np.intp)
        return CalibratedScan(np.empty(0, np.int8), empty, np.empty(0), np.empty(0), np.empty((0, 3))), None
    index, normals, degenerate = scan_normals(scan, settings)
    calibrated = calibrate_scan(
        scan, normals, degenerate, settings.gate, settings.alpha_max, settings.alpha_model
    )
    return calibrated, index
