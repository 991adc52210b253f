"""Scan-level steps shared by the command-line tools."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import geometry
from .calibration import (
    CalibrationSettings,
    alpha_features,
    calibrate_raw_scan,
    extract_alpha_ground_truth,
    scan_normals,
)
from .errors import InsufficientDataError
from .profiles import ProfileSet, build_profiles, classify_scan
from .scan import SELF_RETURN_RANGE, ClassId, Scan, Sensor
from .transfer import TransferCurve, convert_velodyne


def ordered_map(fn, items, jobs=1):
    """``map`` over ``items`` with up to ``jobs`` threads; results keep input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@dataclass
class AlphaTrainingSet:
    features: np.ndarray
    targets: np.ndarray
    class_counts: dict

    def __len__(self):
        return len(self.targets)


def _usable_geometry(scan: Scan, settings: CalibrationSettings):
    _, normals, degenerate = scan_normals(scan, settings)
    r = scan.range
    keep = (
        settings.gate.contains(r)
        & ~degenerate
        & (r >= SELF_RETURN_RANGE)
        & (scan.labels != ClassId.VOID)
    )
    beams = scan.xyz[keep] / r[keep, None]
    return r[keep], scan.intensity[keep], normals[keep], beams, scan.labels[keep]


def alpha_training_set(
    scans,
    settings: CalibrationSettings = CalibrationSettings(),
    bin_width=1.0,
    percentile=99.0,
    min_bin_count=20,
    jobs=1,
) -> AlphaTrainingSet:
    """Features (normal, beam) and intensity-derived incidence angles.

    Angles come from each class's per-range-bin intensity maxima pooled over
    all scans; points in under-populated bins are dropped.
    """
    parts = ordered_map(lambda s: _usable_geometry(s, settings), scans, jobs)
    if not parts:
        raise InsufficientDataError("no labeled scans")
    r, i, n, b, lab = (np.concatenate([p[k] for p in parts]) for k in range(5))
    feats, targets, counts = [], [], {}
    for cls in np.unique(lab):
        m = lab == cls
        alpha, _ = extract_alpha_ground_truth(
            r[m], i[m], settings.gate, bin_width, percentile, min_bin_count
        )
        ok = np.isfinite(alpha)
        counts[ClassId(int(cls))] = int(ok.sum())
        feats.append(alpha_features(n[m][ok], b[m][ok]))
        targets.append(alpha[ok])
    X = np.concatenate(feats) if feats else np.empty((0, 6))
    y = np.concatenate(targets) if targets else np.empty(0)
    return AlphaTrainingSet(X, y, counts)


def calibrated_values(scans, settings: CalibrationSettings = CalibrationSettings(), jobs=1):
    """Calibrated intensities and labels of every accepted point, scans concatenated."""

    def one(scan):
        cal, _ = calibrate_raw_scan(scan, settings)
        return cal.calibrated_intensity, scan.labels[cal.index]

    parts = ordered_map(one, scans, jobs)
    if not parts:
        return np.empty(0), np.empty(0, np.uint8)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def profile_scans(
    scans,
    settings: CalibrationSettings = CalibrationSettings(),
    min_support=1000,
    bin_fraction=0.01,
    min_bins=64,
    extra_settings=None,
    jobs=1,
) -> ProfileSet:
    values, labels = calibrated_values(scans, settings, jobs)
    meta = dict(settings.as_dict())
    meta.update(extra_settings or {})
    return build_profiles(values, labels, min_support, bin_fraction, min_bins, meta)


def segment_scan(
    scan: Scan,
    profiles: ProfileSet,
    settings: CalibrationSettings = CalibrationSettings(),
    curve: TransferCurve | None = None,
    filter_radius: float = 0.0,
) -> np.ndarray:
    """Per-point predictions for one scan, void wherever no prediction is possible.

    Velodyne scans are converted with ``curve`` first; points outside its
    domain stay void.
    """
    pred = np.full(len(scan), int(ClassId.VOID), dtype=np.uint8)
    if len(scan) == 0:
        return pred
    work, kept = scan, np.ones(len(scan), bool)
    if scan.sensor == Sensor.VELODYNE_PREPROCESSED:
        work, kept = convert_velodyne(scan, curve, return_mask=True)
    sub = classify_scan(work, profiles, settings, filter_radius)
    pred[kept] = sub
    return pred


def pca_baseline_alpha(features) -> np.ndarray:
    """Analytic ``arccos(|n . l|)`` from the six-feature rows."""
    features = np.asarray(features, dtype=float)
    n = features[:, :3] / np.linalg.norm(features[:, :3], axis=1, keepdims=True)
    b = features[:, 3:] / np.linalg.norm(features[:, 3:], axis=1, keepdims=True)
    return geometry.incidence_angle(b, n)
