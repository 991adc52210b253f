"""Per-class calibrated-intensity profiles and nearest-mode classification."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from ._io import atomic_write
from .calibration import CalibrationSettings, calibrate_raw_scan
from .errors import ContractError, FileFormatError, InsufficientDataError
from .geometry import SpatialIndex
from .scan import ClassId, Scan

logger = logging.getLogger(__name__)

DEFAULT_MIN_SUPPORT = 1000
BIN_FRACTION = 0.01
MIN_BINS = 64


@dataclass(frozen=True, eq=False)
class ClassProfile:
    class_id: ClassId
    edges: np.ndarray
    counts: np.ndarray
    mode: float
    support: int
    spread: float

    def as_dict(self) -> dict:
        return {
            "class": ClassId(self.class_id).name.lower(),
            "mode": float(self.mode),
            "support": int(self.support),
            "spread": float(self.spread),
            "bin_edges": [float(e) for e in self.edges],
            "counts": [int(c) for c in self.counts],
        }

    @classmethod
    def from_dict(cls, d) -> "ClassProfile":
        return cls(
            ClassId.from_name(d["class"]),
            np.asarray(d["bin_edges"], dtype=float),
            np.asarray(d["counts"], dtype=np.int64),
            float(d["mode"]),
            int(d["support"]),
            float(d["spread"]),
        )


def build_profile(values, class_id, bin_fraction=BIN_FRACTION, min_bins=MIN_BINS) -> ClassProfile:
    """Histogram one class's calibrated values and take the peak bin center as mode.

    Bins are ``bin_fraction`` of the value range wide, with at least
    ``min_bins`` of them. Ties between bins resolve to the lower bin.
    """
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise InsufficientDataError(f"no values for class {ClassId(class_id).name}")
    lo, hi = v[0], v[-1]
    n_bins = max(min_bins, int(np.ceil(1.0 / bin_fraction - 1e-9)))
    if hi == lo:
        edges = np.linspace(lo - 0.5, hi + 0.5, n_bins + 1)
        counts = np.histogram(v, edges)[0]
        mode = lo
    else:
        edges = np.linspace(lo, hi, n_bins + 1)
        counts = np.histogram(v, edges)[0]
        peak = int(np.argmax(counts))
        mode = 0.5 * (edges[peak] + edges[peak + 1])
    q1, q3 = np.percentile(v, [25, 75])
    return ClassProfile(ClassId(class_id), edges, counts, float(mode), int(v.size), float(q3 - q1))


@dataclass(frozen=True, eq=False)
class ProfileSet:
    """Immutable collection of class profiles plus the settings that built them."""

    profiles: tuple
    settings: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [int(p.class_id) for p in self.profiles]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate class in profile set")
        object.__setattr__(
            self, "profiles", tuple(sorted(self.profiles, key=lambda p: int(p.class_id)))
        )

    def __len__(self):
        return len(self.profiles)

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([int(p.class_id) for p in self.profiles], dtype=np.uint8)

    @property
    def modes(self) -> np.ndarray:
        return np.array([p.mode for p in self.profiles])

    def __getitem__(self, class_id) -> ClassProfile:
        for p in self.profiles:
            if p.class_id == class_id:
                return p
        raise KeyError(class_id)

    def classify(self, values) -> np.ndarray:
        """Nearest-mode class for each value; ties go to the lower class id."""
        if not self.profiles:
            raise ContractError("profile set is empty")
        v = np.asarray(values, dtype=float).reshape(-1)
        dist = np.abs(v[:, None] - self.modes[None, :])
        return self.class_ids[np.argmin(dist, axis=1)]

    def to_json(self) -> str:
        doc = {
            "settings": self.settings,
            "excluded": {ClassId(k).name.lower(): int(v) for k, v in sorted(self.excluded.items())},
            "profiles": [p.as_dict() for p in self.profiles],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ProfileSet":
        try:
            doc = json.loads(text)
            profiles = tuple(ClassProfile.from_dict(d) for d in doc["profiles"])
            excluded = {ClassId.from_name(k): v for k, v in doc.get("excluded", {}).items()}
            return cls(profiles, doc.get("settings", {}), excluded)
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(f"malformed profile document: {exc}") from None

    def save(self, path):
        atomic_write(path, self.to_json())

    @classmethod
    def load(cls, path) -> "ProfileSet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def classify_point(value: float, profiles: ProfileSet) -> ClassId:
    return ClassId(int(profiles.classify([value])[0]))


def build_profiles(
    values,
    labels,
    min_support=DEFAULT_MIN_SUPPORT,
    bin_fraction=BIN_FRACTION,
    min_bins=MIN_BINS,
    settings: dict | None = None,
) -> ProfileSet:
    """One profile per labeled class; void points are ignored.

    Classes with fewer than ``min_support`` points are left out and listed in
    ``ProfileSet.excluded`` with their counts.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if values.size != labels.size:
        raise ContractError("values and labels must be parallel")
    profiles, excluded = [], {}
    for cls_id in np.unique(labels):
        if cls_id == ClassId.VOID:
            continue
        vals = values[labels == cls_id]
        if vals.size < min_support:
            logger.warning(
                "class %s has %d points (< %d); excluded",
                ClassId(int(cls_id)).name, vals.size, min_support,
            )
            excluded[ClassId(int(cls_id))] = int(vals.size)
            continue
        profiles.append(build_profile(vals, int(cls_id), bin_fraction, min_bins))
    full_settings = {"min_support": min_support, "bin_fraction": bin_fraction, "min_bins": min_bins}
    full_settings.update(settings or {})
    return ProfileSet(tuple(profiles), full_settings, excluded)


def neighborhood_mode_filter(predictions, index: SpatialIndex, radius: float) -> np.ndarray:
    """Replace each label by the majority label within ``radius`` (self included).

    A tie for the majority keeps the original label.
    """
    pred = np.asarray(predictions).reshape(-1)
    if pred.size != len(index):
        raise ContractError("predictions must be parallel to the indexed points")
    owner, neighbor, _ = index.query_radius_all(radius)
    n_labels = int(pred.max()) + 1 if pred.size else 1
    votes = np.bincount(owner * n_labels + pred[neighbor], minlength=pred.size * n_labels)
    votes = votes.reshape(pred.size, n_labels)
    best = votes.max(axis=1)
    winner = np.argmax(votes, axis=1)
    unique = np.count_nonzero(votes == best[:, None], axis=1) == 1
    out = pred.copy()
    out[unique] = winner[unique].astype(pred.dtype)
    return out


def classify_scan(
    scan: Scan,
    profiles: ProfileSet,
    settings: CalibrationSettings = CalibrationSettings(),
    filter_radius: float | None = None,
) -> np.ndarray:
    """Per-point class predictions; points the calibration rejects become void.

    With ``filter_radius`` the predictions are smoothed by
    :func:`neighborhood_mode_filter`.
    """
    pred = np.full(len(scan), int(ClassId.VOID), dtype=np.uint8)
    calibrated, index = calibrate_raw_scan(scan, settings)
    if len(calibrated):
        pred[calibrated.index] = profiles.classify(calibrated.calibrated_intensity)
    if filter_radius and index is not None:
        pred = neighborhood_mode_filter(pred, index, filter_radius)
    return pred


def _as_column(X):
    X = np.asarray(X, dtype=float)
    return check_array(X.reshape(-1, 1) if X.ndim == 1 else X)


class ModeProximityClassifier(ClassifierMixin, BaseEstimator):
    """Nearest-mode classifier over one feature (calibrated intensity)."""

    def __init__(self, min_support=DEFAULT_MIN_SUPPORT, bin_fraction=BIN_FRACTION, min_bins=MIN_BINS):
        self.min_support = min_support
        self.bin_fraction = bin_fraction
        self.min_bins = min_bins

    def fit(self, X, y):
        X = _as_column(X)
        if X.shape[1] != 1:
            raise ValueError("expected a single calibrated-intensity column")
        y = column_or_1d(y)
        self.profiles_ = build_profiles(X[:, 0], y, self.min_support, self.bin_fraction, self.min_bins)
        if not len(self.profiles_):
            raise InsufficientDataError("no class met the minimum support")
        self.classes_ = self.profiles_.class_ids
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "profiles_")
        X = _as_column(X)
        return self.profiles_.classify(X[:, 0])
