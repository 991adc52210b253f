"""Scan containers, the working class ontology, and KITTI-style binary I/O.

Scan files are consecutive 16-byte records of little-endian float32
``(x, y, z, intensity)``. Label files hold one little-endian uint32 per point
whose low 16 bits are the dataset's semantic id.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .errors import LabelCountError, ScanFormatError

logger = logging.getLogger(__name__)

POINT_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
RECORD_BYTES = 16

#: points closer than this are treated as sensor-housing returns
SELF_RETURN_RANGE = 0.5


class Sensor(str, enum.Enum):
    OUSTER_RAW = "ouster"
    VELODYNE_PREPROCESSED = "velodyne"


class ClassId(enum.IntEnum):
    VOID = 0
    GRASS = 1
    TREE = 2
    BUSH = 3
    PUDDLE = 4
    PERSON = 5

    @classmethod
    def from_name(cls, name: str) -> "ClassId":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown class name {name!r}") from None


@dataclass(frozen=True)
class Ontology:
    """Total map from 16-bit dataset semantic ids to :class:`ClassId`.

    Ids not listed in the table map to ``VOID``.
    """

    table: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "Ontology":
        table = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise ScanFormatError(
                        f"{path}:{lineno}: expected '<raw_id> <class_name>'"
                    )
                try:
                    raw = int(parts[0], 0)
                    cls_id = ClassId.from_name(parts[1])
                except ValueError as exc:
                    raise ScanFormatError(f"{path}:{lineno}: {exc}") from None
                if not 0 <= raw <= 0xFFFF:
                    raise ScanFormatError(f"{path}:{lineno}: raw id {raw} exceeds 16 bits")
                table[raw] = cls_id
        return cls(table)

    @classmethod
    def default(cls) -> "Ontology":
        ref = resources.files("lidar_intensity").joinpath("data/rellis_ontology.txt")
        with resources.as_file(ref) as path:
            return cls.from_file(path)

    def lookup_array(self) -> np.ndarray:
        lut = np.zeros(0x10000, dtype=np.uint8)
        for raw, cls_id in self.table.items():
            lut[raw] = int(cls_id)
        return lut

    def map(self, raw_ids):
        """Map raw label words to class ids.

        Returns ``(class_ids, n_unknown)`` where ``n_unknown`` counts ids
        absent from the table.
        """
        semantic = np.asarray(raw_ids, dtype=np.uint32) & 0xFFFF
        known = np.zeros(0x10000, dtype=bool)
        known[list(self.table)] = True
        n_unknown = int(np.count_nonzero(~known[semantic]))
        return self.lookup_array()[semantic], n_unknown

    def to_raw(self, class_ids) -> np.ndarray:
        """Inverse map using the smallest raw id listed for each class."""
        inverse = {}
        for raw in sorted(self.table):
            inverse.setdefault(int(self.table[raw]), raw)
        class_ids = np.asarray(class_ids)
        out = np.zeros(class_ids.shape, dtype=np.uint32)
        for cls_id in np.unique(class_ids):
            if int(cls_id) not in inverse:
                raise ValueError(f"ontology has no raw id for {ClassId(int(cls_id)).name}")
            out[class_ids == cls_id] = inverse[int(cls_id)]
        return out


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Scan:
    """One LiDAR sweep in the sensor frame.

    ``xyz`` is ``(n, 3)``, ``intensity`` is ``(n,)``. ``labels`` holds
    :class:`ClassId` values when present. Arrays are read-only.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    sensor: Sensor = Sensor.OUSTER_RAW
    labels: np.ndarray | None = None

    def __post_init__(self):
        xyz = np.asarray(self.xyz)
        if xyz.size == 0:
            xyz = xyz.reshape(0, 3)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must have shape (n, 3), got {xyz.shape}")
        intensity = np.asarray(self.intensity).reshape(-1)
        if intensity.shape[0] != xyz.shape[0]:
            raise ValueError("intensity must have one entry per point")
        if not (np.all(np.isfinite(xyz)) and np.all(np.isfinite(intensity))):
            raise ValueError("scan values must be finite")
        if np.any(intensity < 0):
            raise ValueError("intensity must be non-negative")
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "intensity", _frozen(intensity))
        object.__setattr__(self, "sensor", Sensor(self.sensor))
        if self.labels is not None:
            labels = np.asarray(self.labels).reshape(-1)
            if labels.shape[0] != xyz.shape[0]:
                raise LabelCountError(labels.shape[0], xyz.shape[0])
            object.__setattr__(self, "labels", _frozen(labels, np.uint8))

    def __len__(self):
        return self.xyz.shape[0]

    @property
    def range(self) -> np.ndarray:
        return np.linalg.norm(self.xyz, axis=1)

    def self_return_mask(self, min_range: float = SELF_RETURN_RANGE) -> np.ndarray:
        """True for points close enough to be sensor-housing returns."""
        return self.range < min_range

    def with_labels(self, labels) -> "Scan":
        return Scan(self.xyz, self.intensity, self.sensor, labels)

    def with_intensity(self, intensity, sensor: Sensor | None = None) -> "Scan":
        return Scan(self.xyz, intensity, sensor or self.sensor, self.labels)

    def subset(self, mask) -> "Scan":
        labels = None if self.labels is None else self.labels[mask]
        return Scan(self.xyz[mask], self.intensity[mask], self.sensor, labels)

    def equals(self, other: "Scan") -> bool:
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None
            and other.labels is not None
            and np.array_equal(self.labels, other.labels)
        )
        return (
            self.sensor == other.sensor
            and np.array_equal(self.xyz, other.xyz)
            and np.array_equal(self.intensity, other.intensity)
            and same_labels
        )


def read_scan(path, sensor: Sensor = Sensor.OUSTER_RAW) -> Scan:
    data = Path(path).read_bytes()
    remainder = len(data) % RECORD_BYTES
    if remainder:
        offset = len(data) - remainder
        raise ScanFormatError(f"{path}: truncated record at byte offset {offset}")
    records = np.frombuffer(data, dtype=POINT_DTYPE).reshape(-1, 4)
    finite = np.isfinite(records).all(axis=1)
    if not finite.all():
        idx = int(np.flatnonzero(~finite)[0])
        raise ScanFormatError(f"{path}: non-finite value at point index {idx}")
    negative = records[:, 3] < 0
    if negative.any():
        idx = int(np.flatnonzero(negative)[0])
        raise ScanFormatError(f"{path}: negative intensity at point index {idx}")
    return Scan(records[:, :3], records[:, 3], sensor)


def write_scan(scan: Scan, path):
    """Write ``scan`` as float32 records. Values are cast to float32."""
    records = np.empty((len(scan), 4), dtype=POINT_DTYPE)
    records[:, :3] = scan.xyz
    records[:, 3] = scan.intensity
    atomic_write(path, records.tobytes())


def read_raw_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) % 4:
        raise ScanFormatError(
            f"{path}: truncated label at byte offset {len(data) - len(data) % 4}"
        )
    return np.frombuffer(data, dtype=LABEL_DTYPE).copy()


def write_raw_labels(raw_ids, path):
    atomic_write(path, np.asarray(raw_ids, dtype=LABEL_DTYPE).tobytes())


def read_labels(path, scan: Scan, ontology: Ontology | None = None) -> Scan:
    raw = read_raw_labels(path)
    if raw.shape[0] != len(scan):
        raise LabelCountError(raw.shape[0], len(scan))
    ontology = ontology or Ontology.default()
    labels, n_unknown = ontology.map(raw)
    if n_unknown:
        logger.warning("%s: %d labels with unknown ids mapped to void", path, n_unknown)
    return scan.with_labels(labels)


def write_labels(scan: Scan, path, ontology: Ontology | None = None):
    if scan.labels is None:
        raise ValueError("scan has no labels")
    ontology = ontology or Ontology.default()
    write_raw_labels(ontology.to_raw(scan.labels), path)
