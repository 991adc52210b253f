"""Convert Velodyne-preprocessed intensity back to raw, Ouster-style intensity.

Velodyne firmware range-compensates and quantises intensity. Comparing the
per-range maximum intensity of the same classes seen by both sensors gives a
ratio ``Q(r) = max_ouster(r) / max_velodyne(r)`` that does not depend on the
surface; a smooth fit of ``Q`` then maps Velodyne values to raw ones via
``raw = Q(r) * velodyne``.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._io import atomic_write
from .calibration import DEFAULT_GATE, DEFAULT_MIN_BIN_COUNT, DEFAULT_PERCENTILE, RangeGate, range_bins
from .errors import (
    ContractError,
    DomainError,
    FileFormatError,
    FitRejectedError,
    InsufficientDataError,
    SensorMismatchError,
)
from .scan import ClassId, Scan, Sensor

logger = logging.getLogger(__name__)

DEFAULT_DEGREE = 3
DEFAULT_RANGE_POWER = 2
DEFAULT_BIN_WIDTH = 1.0

# Exponent used to refer each return to its bin center: raw returns fall as
# 1/r^2, factory-compensated ones are already range-flat.
_REFERRAL_EXPONENT = {Sensor.OUSTER_RAW: 2.0, Sensor.VELODYNE_PREPROCESSED: 0.0}


@dataclass(frozen=True, eq=False)
class MaxCurve:
    """Robust per-range-bin maximum intensity of one class on one sensor."""

    class_id: ClassId
    sensor: Sensor
    edges: np.ndarray
    values: np.ndarray
    counts: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)


def build_max_curve(
    scans,
    class_id,
    gate: RangeGate = DEFAULT_GATE,
    bin_width: float = DEFAULT_BIN_WIDTH,
    percentile: float = DEFAULT_PERCENTILE,
    min_bin_count: int = DEFAULT_MIN_BIN_COUNT,
) -> MaxCurve:
    """Robust per-bin maximum of ``class_id`` intensities pooled over ``scans``.

    Each return is first referred to its bin-center range using the sensor's
    expected range falloff, so the curve is not biased toward the near edge
    of each bin.
    """
    if isinstance(scans, Scan):
        scans = [scans]
    sensors = {s.sensor for s in scans}
    if len(sensors) != 1:
        raise ContractError("all scans of a max curve must come from one sensor")
    sensor = sensors.pop()
    r_parts, i_parts = [], []
    for scan in scans:
        if scan.labels is None:
            raise ContractError("max curves need labeled scans")
        m = scan.labels == class_id
        r_parts.append(scan.range[m])
        i_parts.append(scan.intensity[m])
    r = np.concatenate(r_parts) if r_parts else np.empty(0)
    intensity = np.concatenate(i_parts) if i_parts else np.empty(0)
    keep = gate.contains(r)
    r, intensity = r[keep], intensity[keep]

    edges = range_bins(gate, bin_width)
    centers = 0.5 * (edges[:-1] + edges[1:])
    which = np.clip(np.searchsorted(edges, r, side="right") - 1, 0, len(centers) - 1)
    referred = intensity * (r / centers[which]) ** _REFERRAL_EXPONENT[sensor]
    values = np.full(len(centers), np.nan)
    counts = np.bincount(which, minlength=len(centers))
    for k in np.flatnonzero(counts >= max(min_bin_count, 1)):
        values[k] = np.percentile(referred[which == k], percentile)
    if not np.isfinite(values).any():
        raise InsufficientDataError(
            f"no range bin has {min_bin_count} {ClassId(int(class_id)).name.lower()} points"
        )
    return MaxCurve(ClassId(int(class_id)), sensor, edges, values, counts)


@dataclass(frozen=True, eq=False)
class QSeries:
    """Per-bin ratio of raw to preprocessed maxima for one class."""

    class_id: ClassId
    lo: np.ndarray
    hi: np.ndarray
    q: np.ndarray
    weight: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def diagnostics(self) -> dict:
        """``Q``, ``Q*r`` and ``Q*r**2`` at each bin center."""
        r = self.centers
        return {"r": r, "q": self.q, "q_r": self.q * r, "q_r2": self.q * r**2}


def compute_q(ouster: MaxCurve, velodyne: MaxCurve) -> QSeries:
    if ouster.class_id != velodyne.class_id or not np.array_equal(ouster.edges, velodyne.edges):
        raise ContractError("curves must share class and range binning")
    usable = ouster.valid & velodyne.valid
    zero = usable & (velodyne.values == 0)
    if zero.any():
        logger.warning("dropping %d bins with zero Velodyne maximum", int(zero.sum()))
    usable &= ~zero
    idx = np.flatnonzero(usable)
    return QSeries(
        ouster.class_id,
        ouster.edges[idx],
        ouster.edges[idx + 1],
        ouster.values[idx] / velodyne.values[idx],
        np.minimum(ouster.counts[idx], velodyne.counts[idx]).astype(float),
    )


@dataclass(frozen=True)
class PairIndependence:
    class_a: ClassId
    class_b: ClassId
    centers: np.ndarray
    ratio: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.ratio)) if self.ratio.size else float("nan")

    @property
    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.ratio - 1.0))) if self.ratio.size else float("nan")


def check_class_independence(q_curves) -> list:
    """Per-bin ``Q_a / Q_b`` for every class pair, over bins both classes cover."""
    curves = list(q_curves.values()) if isinstance(q_curves, dict) else list(q_curves)
    if len(curves) < 2:
        raise ContractError("class-independence check needs at least two classes")
    out = []
    for a, b in itertools.combinations(sorted(curves, key=lambda c: int(c.class_id)), 2):
        common, ia, ib = np.intersect1d(a.lo, b.lo, return_indices=True)
        out.append(PairIndependence(a.class_id, b.class_id, common + 0.5 * (a.hi[ia] - a.lo[ia]),
                                    a.q[ia] / b.q[ib]))
    return out


@dataclass(frozen=True, eq=False)
class TransferCurve:
    """``Q(r) = P(r) / r**range_power`` with ``P`` an ascending-coefficient polynomial."""

    coefficients: np.ndarray
    domain: tuple
    residual_rms: float
    range_power: int = DEFAULT_RANGE_POWER

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        lo, hi = self.domain
        if np.any((r < lo) | (r > hi)):
            raise DomainError(f"range outside transfer domain [{lo}, {hi}]")
        return self._eval(r)

    def _eval(self, r):
        return Polynomial(self.coefficients)(r) / r**self.range_power

    def in_domain(self, r):
        lo, hi = self.domain
        r = np.asarray(r)
        return (r >= lo) & (r <= hi)

    def to_text(self, extra_header: dict | None = None) -> str:
        lines = ["# lidar_intensity transfer curve v1"]
        lines += [f"# {k} = {v}" for k, v in (extra_header or {}).items()]
        lines += [
            f"degree {self.degree}",
            f"range_power {self.range_power}",
            "coefficients " + " ".join(repr(float(c)) for c in self.coefficients),
            f"domain {float(self.domain[0])!r} {float(self.domain[1])!r}",
            f"residual_rms {float(self.residual_rms)!r}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TransferCurve":
        fields = {}
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, rest = line.partition(" ")
                fields[key] = rest.split()
        try:
            coefs = np.array([float(c) for c in fields["coefficients"]])
            degree = int(fields["degree"][0])
            lo, hi = (float(v) for v in fields["domain"])
            rms = float(fields["residual_rms"][0])
            power = int(fields.get("range_power", ["0"])[0])
        except (KeyError, ValueError, IndexError) as exc:
            raise FileFormatError(f"malformed transfer curve: {exc}") from None
        if coefs.size != degree + 1:
            raise FileFormatError(f"degree {degree} needs {degree + 1} coefficients, got {coefs.size}")
        return cls(coefs, (lo, hi), rms, power)

    def save(self, path, extra_header: dict | None = None):
        atomic_write(path, self.to_text(extra_header))

    @classmethod
    def load(cls, path) -> "TransferCurve":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _pool(q_series):
    if isinstance(q_series, QSeries):
        q_series = [q_series]
    q_series = list(q_series)
    r = np.concatenate([s.centers for s in q_series])
    q = np.concatenate([s.q for s in q_series])
    w = np.concatenate([s.weight for s in q_series])
    lo = min(float(s.lo.min()) for s in q_series if s.lo.size) if r.size else 0.0
    hi = max(float(s.hi.max()) for s in q_series if s.hi.size) if r.size else 0.0
    return r, q, w, (lo, hi)


def fit_transfer(
    q_series,
    degree: int = DEFAULT_DEGREE,
    range_power: int = DEFAULT_RANGE_POWER,
    domain=None,
) -> TransferCurve:
    """Weighted least-squares fit of ``Q(r) * r**range_power`` by a polynomial in ``r``.

    ``q_series`` is one :class:`QSeries`, several (pooled, weighted by bin
    counts), or an ``(r, q)`` pair of arrays. ``range_power=0`` fits ``Q``
    itself.
    """
    if isinstance(q_series, tuple) and len(q_series) == 2 and not isinstance(q_series[0], QSeries):
        r, q = (np.asarray(a, dtype=float) for a in q_series)
        w = np.ones_like(r)
        auto_domain = (float(r.min()), float(r.max())) if r.size else (0.0, 0.0)
    else:
        r, q, w, auto_domain = _pool(q_series)
    if r.size < degree + 1:
        raise InsufficientDataError(f"degree {degree} fit needs {degree + 1} bins, got {r.size}")
    domain = tuple(map(float, domain)) if domain is not None else auto_domain
    target = q * r**range_power
    poly = Polynomial.fit(r, target, degree, w=np.sqrt(w)).convert()
    coefs = np.zeros(degree + 1)
    coefs[: poly.coef.size] = poly.coef
    curve = TransferCurve(coefs, domain, 0.0, range_power)
    residual = float(np.sqrt(np.mean((curve._eval(r) - q) ** 2)))
    curve = TransferCurve(coefs, domain, residual, range_power)

    grid = np.linspace(domain[0], domain[1], 2001)
    roots = Polynomial(coefs).roots()
    real_roots = roots[np.abs(roots.imag) < 1e-9].real
    if np.any(curve._eval(grid) <= 0) or np.any(
        (real_roots >= domain[0]) & (real_roots <= domain[1])
    ):
        raise FitRejectedError("fitted Q is not positive over its whole domain")
    return curve


def convert_velodyne(scan: Scan, curve: TransferCurve, return_mask: bool = False):
    """Scale Velodyne intensities by ``Q(range)``; points outside the curve domain are dropped.

    Returns the converted raw-tagged scan, and with ``return_mask`` also the
    boolean mask of input points that were kept.
    """
    if scan.sensor != Sensor.VELODYNE_PREPROCESSED:
        raise SensorMismatchError("convert_velodyne expects a Velodyne-preprocessed scan")
    r = scan.range
    keep = curve.in_domain(r)
    if len(scan) and not keep.any():
        raise DomainError(
            f"no point lies inside the transfer domain [{curve.domain[0]}, {curve.domain[1]}]"
        )
    dropped = int((~keep).sum())
    if dropped:
        logger.info("dropped %d points outside the transfer domain", dropped)
    kept = scan.subset(keep)
    converted = Scan(
        kept.xyz, kept.intensity * curve(kept.range) if len(kept) else kept.intensity,
        Sensor.OUSTER_RAW, kept.labels,
    )
    return (converted, keep) if return_mask else converted


class VelodyneTransfer(TransformerMixin, BaseEstimator):
    """Fit ``Q(r)`` from paired labeled scans, then convert Velodyne scans.

    ``fit`` takes a list of raw (Ouster) scans and a list of preprocessed
    (Velodyne) scans of the same scenes. Every non-void class present in both
    contributes a ratio series; the fit pools them.
    """

    def __init__(
        self,
        degree=DEFAULT_DEGREE,
        range_power=DEFAULT_RANGE_POWER,
        r_min=6.0,
        r_max=60.0,
        bin_width=DEFAULT_BIN_WIDTH,
        percentile=DEFAULT_PERCENTILE,
        min_bin_count=DEFAULT_MIN_BIN_COUNT,
    ):
        self.degree = degree
        self.range_power = range_power
        self.r_min = r_min
        self.r_max = r_max
        self.bin_width = bin_width
        self.percentile = percentile
        self.min_bin_count = min_bin_count

    def fit(self, ouster_scans, velodyne_scans):
        gate = RangeGate(self.r_min, self.r_max)
        ouster_scans = [ouster_scans] if isinstance(ouster_scans, Scan) else list(ouster_scans)
        velodyne_scans = [velodyne_scans] if isinstance(velodyne_scans, Scan) else list(velodyne_scans)
        present = set.intersection(
            {int(c) for s in ouster_scans for c in np.unique(s.labels)},
            {int(c) for s in velodyne_scans for c in np.unique(s.labels)},
        ) - {int(ClassId.VOID)}
        series = {}
        for cls_id in sorted(present):
            try:
                o = build_max_curve(ouster_scans, cls_id, gate, self.bin_width, self.percentile, self.min_bin_count)
                v = build_max_curve(velodyne_scans, cls_id, gate, self.bin_width, self.percentile, self.min_bin_count)
            except InsufficientDataError as exc:
                logger.warning("skipping class %s: %s", ClassId(cls_id).name, exc)
                continue
            s = compute_q(o, v)
            if s.q.size:
                series[ClassId(cls_id)] = s
        if not series:
            raise InsufficientDataError("no class has usable max curves on both sensors")
        self.q_series_ = series
        self.independence_ = check_class_independence(series) if len(series) > 1 else []
        self.curve_ = fit_transfer(list(series.values()), self.degree, self.range_power)
        return self

    def transform(self, scan):
        check_is_fitted(self, "curve_")
        return convert_velodyne(scan, self.curve_)
