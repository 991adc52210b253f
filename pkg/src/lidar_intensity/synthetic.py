"""Forward sensor model used as ground truth for calibration and transfer.

Returned power follows ``eta(R) * E * rho * cos(alpha) / R**2``; ``eta`` is 1
beyond the near-range threshold and ramps down exponentially inside it.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import SceneSpecError
from .scan import ClassId, Scan, Sensor

EMITTED_POWER = 1.0e4
_EPS = 1e-9


@dataclass(frozen=True)
class NearRangeModel:
    threshold: float = 6.0
    k: float = 0.5

    def eta(self, r):
        r = np.asarray(r, dtype=float)
        return np.where(r >= self.threshold, 1.0, np.exp(-self.k * (self.threshold - r)))


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple

    def __post_init__(self):
        n = np.asarray(self.normal, float)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("plane normal must be non-zero")
        object.__setattr__(self, "normal", tuple(n / norm))
        object.__setattr__(self, "point", tuple(map(float, self.point)))

    def intersect(self, dirs):
        n = np.asarray(self.normal)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.dot(self.point, n) / denom
        t[~np.isfinite(t) | (t <= _EPS)] = np.inf
        return t

    def normal_at(self, hits):
        return np.broadcast_to(np.asarray(self.normal), hits.shape)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        object.__setattr__(self, "center", tuple(map(float, self.center)))

    def intersect(self, dirs):
        c = np.asarray(self.center)
        b = dirs @ c
        disc = b**2 - (c @ c - self.radius**2)
        with np.errstate(invalid="ignore"):
            root = np.sqrt(disc)
        near, far = b - root, b + root
        t = np.where(near > _EPS, near, far)
        t[~(disc >= 0) | (t <= _EPS)] = np.inf
        return t

    def normal_at(self, hits):
        return (hits - np.asarray(self.center)) / self.radius


@dataclass(frozen=True)
class SceneSurface:
    geometry: Plane | Sphere
    rho: float
    class_id: ClassId = ClassId.VOID
    sigma: float = 0.0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("reflectivity must be positive")
        if not 0 <= self.sigma <= 0.2:
            raise ValueError("noise sigma must lie in [0, 0.2]")
        object.__setattr__(self, "class_id", ClassId(self.class_id))


class SensorMode(str, enum.Enum):
    RAW_OUSTER = "ouster"
    SIMULATED_VELODYNE = "velodyne"


@dataclass(frozen=True)
class RangeCompensation:
    """Hidden factory compensation ``g(r) = c * r**2``; the ideal transfer is ``1/g``."""

    c: float = 1.0e-4

    def __call__(self, r):
        return self.c * np.asarray(r, dtype=float) ** 2

    def true_q(self, r):
        return 1.0 / self(r)


@dataclass(frozen=True)
class SensorSimConfig:
    azimuth_steps: int = 1024
    azimuth_min_deg: float = -180.0
    azimuth_max_deg: float = 180.0
    elevation_steps: int = 64
    elevation_min_deg: float = -22.5
    elevation_max_deg: float = 22.5
    seed: int = 0
    mode: SensorMode = SensorMode.RAW_OUSTER
    compensation: RangeCompensation = field(default_factory=RangeCompensation)
    near_range: NearRangeModel = field(default_factory=NearRangeModel)
    emitted_power: float = EMITTED_POWER

    def ray_directions(self) -> np.ndarray:
        az = np.radians(
            np.linspace(self.azimuth_min_deg, self.azimuth_max_deg, self.azimuth_steps, endpoint=False)
        )
        el = np.radians(np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.elevation_steps))
        el_g, az_g = np.meshgrid(el, az, indexing="ij")
        return np.stack(
            [np.cos(el_g) * np.cos(az_g), np.cos(el_g) * np.sin(az_g), np.sin(el_g)], axis=-1
        ).reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Per-point truth attached to a synthetic scan."""

    rho: np.ndarray
    alpha: np.ndarray
    eta: np.ndarray
    class_id: np.ndarray
    normal: np.ndarray

    def to_text(self) -> str:
        lines = ["# idx rho alpha eta class"]
        for i, (rho, a, e, c) in enumerate(zip(self.rho, self.alpha, self.eta, self.class_id)):
            lines.append(f"{i} {float(rho)!r} {float(a)!r} {float(e)!r} {ClassId(int(c)).name.lower()}")
        return "\n".join(lines) + "\n"


def _truncated_noise(rng, sigma, n):
    if sigma == 0:
        return np.zeros(n)
    return sigma * np.clip(rng.standard_normal(n), -3.0, 3.0)


def forward_intensity(rho, r, alpha, emitted_power=EMITTED_POWER, near_range=NearRangeModel()):
    """Noise-free returned intensity for reflectivity ``rho`` at range ``r`` and angle ``alpha``."""
    r = np.asarray(r, dtype=float)
    return near_range.eta(r) * emitted_power * np.asarray(rho) * np.cos(alpha) / r**2


def generate_scan(scene, config: SensorSimConfig = SensorSimConfig()):
    """Ray-cast ``scene`` from the origin.

    Each ray returns its nearest surface hit; rays missing everything emit
    no point. Returns ``(scan, truth)`` with labels set from the surfaces.
    """
    scene = list(scene)
    if not scene:
        raise ValueError("scene must contain at least one surface")
    dirs = config.ray_directions()
    t_all = np.stack([s.geometry.intersect(dirs) for s in scene])
    which = np.argmin(t_all, axis=0)
    t = t_all[which, np.arange(len(dirs))]
    hit = np.isfinite(t)
    dirs, t, which = dirs[hit], t[hit], which[hit]
    xyz = dirs * t[:, None]

    normals = np.empty_like(xyz)
    for k, surface in enumerate(scene):
        m = which == k
        normals[m] = surface.geometry.normal_at(xyz[m])
    flip = np.sum(normals * dirs, axis=1) > 0
    normals[flip] *= -1
    alpha = np.arccos(np.clip(-np.sum(normals * dirs, axis=1), 0.0, 1.0))

    rho = np.array([s.rho for s in scene])[which]
    sigma = np.array([s.sigma for s in scene])[which]
    labels = np.array([int(s.class_id) for s in scene], dtype=np.uint8)[which]
    eta = config.near_range.eta(t)

    rng = np.random.default_rng(config.seed)
    noise = np.clip(rng.standard_normal(len(t)), -3.0, 3.0) * sigma
    intensity = forward_intensity(rho, t, alpha, config.emitted_power, config.near_range) * (1 + noise)
    intensity = np.maximum(intensity, 0.0)

    scan = Scan(xyz, intensity, Sensor.OUSTER_RAW, labels)
    truth = GroundTruth(rho, alpha, eta, labels, normals)
    if config.mode == SensorMode.SIMULATED_VELODYNE:
        scan = simulate_velodyne_channel(scan, config.compensation)
    return scan, truth


def sample_surface_patches(
    n,
    rho,
    class_id=ClassId.VOID,
    sigma=0.0,
    r_range=(6.0, 60.0),
    alpha_range_deg=(0.0, 70.0),
    seed=0,
    alpha_distribution="plane",
    emitted_power=EMITTED_POWER,
):
    """Independent returns from locally planar patches with known geometry.

    Each point gets a uniform beam direction, a range uniform in ``r_range``
    and a patch tilted by ``alpha`` from head-on. With
    ``alpha_distribution="plane"`` the angles follow the solid-angle density
    a uniform ray fan produces on a plane (``pdf ~ sin(alpha)``); ``"uniform"``
    draws them uniformly.

    Returns ``(scan, truth)``; ``truth.normal`` holds the exact sensor-facing normals.
    """
    rng = np.random.default_rng(seed)
    beam = rng.standard_normal((n, 3))
    beam /= np.linalg.norm(beam, axis=1, keepdims=True)
    r = rng.uniform(*r_range, size=n)
    lo, hi = np.radians(alpha_range_deg)
    if alpha_distribution == "plane":
        alpha = np.arccos(rng.uniform(np.cos(hi), np.cos(lo), size=n))
    elif alpha_distribution == "uniform":
        alpha = rng.uniform(lo, hi, size=n)
    else:
        raise ValueError(f"unknown alpha distribution {alpha_distribution!r}")
    # any unit vector orthogonal to the beam
    helper = rng.standard_normal((n, 3))
    tangent = helper - np.sum(helper * beam, axis=1, keepdims=True) * beam
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = -np.cos(alpha)[:, None] * beam + np.sin(alpha)[:, None] * tangent

    noise = _truncated_noise(rng, sigma, n)
    rho_arr = np.broadcast_to(np.asarray(rho, dtype=float), (n,)).copy()
    intensity = emitted_power * rho_arr * np.cos(alpha) / r**2 * (1 + noise)
    labels = np.full(n, int(class_id), dtype=np.uint8)
    scan = Scan(beam * r[:, None], intensity, Sensor.OUSTER_RAW, labels)
    truth = GroundTruth(rho_arr, alpha, np.ones(n), labels, normal)
    return scan, truth


@dataclass(frozen=True)
class PatchField:
    """Scattered small square planar patches of one material.

    Patch centers are drawn like :func:`sample_surface_patches`; each patch
    is a ``side x side`` grid of points ``spacing`` apart lying in the patch
    plane, so ball-query PCA recovers its normal.
    """

    count: int
    rho: float
    class_id: ClassId = ClassId.VOID
    sigma: float = 0.0
    side: int = 3
    spacing: float = 0.1
    r_range: tuple = (6.0, 60.0)
    alpha_range_deg: tuple = (0.0, 70.0)

    def __post_init__(self):
        if self.count <= 0 or self.side <= 0 or self.spacing <= 0:
            raise ValueError("patch count, side and spacing must be positive")
        SceneSurface(Plane((0, 0, 0), (0, 0, 1)), self.rho, self.class_id, self.sigma)
        object.__setattr__(self, "class_id", ClassId(self.class_id))


def generate_patch_scan(fields, seed=0, emitted_power=EMITTED_POWER, near_range=NearRangeModel()):
    """Sample every :class:`PatchField` and return ``(scan, truth)``."""
    rng = np.random.default_rng(seed)
    xyz, normal_rows, rho_rows, sigma_rows, label_rows = [], [], [], [], []
    for f in fields:
        centers, ctruth = sample_surface_patches(
            f.count, f.rho, f.class_id, 0.0, f.r_range, f.alpha_range_deg,
            seed=int(rng.integers(2**32)),
        )
        c, n = centers.xyz, ctruth.normal
        # in-plane basis; any vector not parallel to n seeds it
        seed_axis = np.eye(3)[np.argmin(np.abs(n), axis=1)]
        u = np.cross(n, seed_axis)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        v = np.cross(n, u)
        offs = (np.arange(f.side) - (f.side - 1) / 2) * f.spacing
        a, b = (g.ravel() for g in np.meshgrid(offs, offs, indexing="ij"))
        pts = c[:, None, :] + a[None, :, None] * u[:, None, :] + b[None, :, None] * v[:, None, :]
        k = a.size
        xyz.append(pts.reshape(-1, 3))
        normal_rows.append(np.repeat(n, k, axis=0))
        rho_rows.append(np.full(f.count * k, float(f.rho)))
        sigma_rows.append(np.full(f.count * k, float(f.sigma)))
        label_rows.append(np.full(f.count * k, int(f.class_id), dtype=np.uint8))
    xyz = np.concatenate(xyz)
    normals = np.concatenate(normal_rows)
    r = np.linalg.norm(xyz, axis=1)
    beams = xyz / r[:, None]
    alpha = np.arccos(np.clip(np.abs(np.sum(beams * normals, axis=1)), 0.0, 1.0))
    rho = np.concatenate(rho_rows)
    sigma = np.concatenate(sigma_rows)
    labels = np.concatenate(label_rows)
    noise = np.clip(rng.standard_normal(len(r)), -3.0, 3.0) * sigma
    intensity = forward_intensity(rho, r, alpha, emitted_power, near_range) * (1 + noise)
    scan = Scan(xyz, np.maximum(intensity, 0.0), Sensor.OUSTER_RAW, labels)
    return scan, GroundTruth(rho, alpha, near_range.eta(r), labels, normals)


def simulate_velodyne_channel(raw_scan: Scan, compensation=RangeCompensation()) -> Scan:
    """Apply factory-style range compensation and 8-bit quantisation.

    ``compensation`` is any callable ``g(r)``; the intensity becomes
    ``clip(round(raw * g(r)), 0, 255)``.
    """
    values = np.clip(np.rint(raw_scan.intensity * compensation(raw_scan.range)), 0, 255)
    return raw_scan.with_intensity(values, Sensor.VELODYNE_PREPROCESSED)


def parse_scene(text: str, source="<scene>"):
    """Parse a scene description.

    One item per line, ``#`` starts a comment::

        plane   px py pz  nx ny nz  rho class [sigma]
        sphere  cx cy cz  radius    rho class [sigma]
        patches count               rho class [sigma] [alpha_max_deg]
    """
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0].lower()
        try:
            if kind == "plane" and len(parts) in (9, 10):
                nums = [float(v) for v in parts[1:8]]
                geom = Plane(tuple(nums[:3]), tuple(nums[3:6]))
                rho, rest = nums[6], parts[8:]
            elif kind == "sphere" and len(parts) in (7, 8):
                nums = [float(v) for v in parts[1:6]]
                geom = Sphere(tuple(nums[:3]), nums[3])
                rho, rest = nums[4], parts[6:]
            elif kind == "patches" and len(parts) in (4, 5, 6):
                count, rho = int(parts[1]), float(parts[2])
                sigma = float(parts[4]) if len(parts) > 4 else 0.0
                alpha_max = float(parts[5]) if len(parts) > 5 else 70.0
                items.append(PatchField(count, rho, ClassId.from_name(parts[3]), sigma,
                                        alpha_range_deg=(0.0, alpha_max)))
                continue
            else:
                raise ValueError(f"cannot parse {parts[0]!r} with {len(parts) - 1} fields")
            sigma = float(rest[1]) if len(rest) > 1 else 0.0
            items.append(SceneSurface(geom, rho, ClassId.from_name(rest[0]), sigma))
        except ValueError as exc:
            raise SceneSpecError(f"{source}:{lineno}: {exc}") from None
    if not items:
        raise SceneSpecError(f"{source}: scene has no surfaces")
    return items


def generate_scene(items, config: SensorSimConfig = SensorSimConfig()):
    """Ray-cast the surfaces and sample the patch fields of a parsed scene.

    Returns ``(scan, truth)``; ray-cast points come first.
    """
    surfaces = [i for i in items if isinstance(i, SceneSurface)]
    patches = [i for i in items if isinstance(i, PatchField)]
    raw_config = dataclasses.replace(config, mode=SensorMode.RAW_OUSTER)
    parts = []
    if surfaces:
        parts.append(generate_scan(surfaces, raw_config))
    if patches:
        parts.append(generate_patch_scan(patches, config.seed + 1, config.emitted_power, config.near_range))
    scan = Scan(
        np.concatenate([p[0].xyz for p in parts]),
        np.concatenate([p[0].intensity for p in parts]),
        Sensor.OUSTER_RAW,
        np.concatenate([p[0].labels for p in parts]),
    )
    truth = GroundTruth(*(np.concatenate([getattr(p[1], name) for p in parts])
                          for name in ("rho", "alpha", "eta", "class_id", "normal")))
    if config.mode == SensorMode.SIMULATED_VELODYNE:
        scan = simulate_velodyne_channel(scan, config.compensation)
    return scan, truth
