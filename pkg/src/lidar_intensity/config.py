"""Pipeline configuration: defaults, ``key = value`` files, env vars, CLI flags.

Precedence is flag > environment (``LIDAR_INTENSITY_<FIELD>``) > file > default.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

import numpy as np

from .calibration import CalibrationSettings, RangeGate
from .errors import FileFormatError

ENV_PREFIX = "LIDAR_INTENSITY_"


@dataclass(frozen=True)
class PipelineConfig:
    r_min: float = 6.0
    r_max: float = 60.0
    ball_radius: float = 0.5
    min_neighbors: int = 5
    alpha_max_deg: float = 85.0
    alpha_source: str = "analytic"
    alpha_model: str = ""
    alpha_bin_width: float = 1.0
    alpha_min_bin_count: int = 20
    robust_percentile: float = 99.0
    min_support: int = 1000
    profile_bin_fraction: float = 0.01
    profile_min_bins: int = 64
    filter_radius: float = 0.0
    transfer_bin_width: float = 1.0
    transfer_degree: int = 3
    transfer_range_power: int = 2
    learning_rate: float = 1e-2
    batch_size: int = 16
    epochs: int = 200
    validation_fraction: float = 0.1
    seed: int = 0
    in_gate_only: bool = False
    ontology: str = ""
    jobs: int = 1
    synth_azimuth_steps: int = 1024
    synth_elevation_steps: int = 64
    synth_elevation_min_deg: float = -22.5
    synth_elevation_max_deg: float = 22.5
    synth_velodyne_c: float = 1.0e-4

    def __post_init__(self):
        RangeGate(self.r_min, self.r_max)
        if self.alpha_source not in ("analytic", "regressor"):
            raise ValueError("alpha_source must be 'analytic' or 'regressor'")
        if self.alpha_source == "regressor" and not self.alpha_model:
            raise ValueError("alpha_source=regressor needs alpha_model")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    @property
    def gate(self) -> RangeGate:
        return RangeGate(self.r_min, self.r_max)

    def calibration_settings(self) -> CalibrationSettings:
        model = None
        if self.alpha_source == "regressor":
            from .regressor import IncidenceAngleRegressor, load_model

            model = IncidenceAngleRegressor.from_model(load_model(self.alpha_model))
        return CalibrationSettings(
            self.gate, self.ball_radius, self.min_neighbors, np.radians(self.alpha_max_deg), model
        )

    def header(self) -> dict:
        """Ordered ``{field: value}`` for embedding in output artifacts."""
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def header_text(self) -> str:
        return "".join(f"# {k} = {v}\n" for k, v in self.header().items())


def _coerce(name, raw):
    kind = {f.name: f.type for f in fields(PipelineConfig)}[name]
    raw = raw.strip() if isinstance(raw, str) else raw
    if kind == "bool":
        if isinstance(raw, bool):
            return raw
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    return {"float": float, "int": int, "str": str}[kind](raw)


def parse_config_text(text: str, source="<config>") -> dict:
    known = {f.name for f in fields(PipelineConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in known:
            raise FileFormatError(f"{source}:{lineno}: unknown or malformed setting {line!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise FileFormatError(f"{source}:{lineno}: {exc}") from None
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> PipelineConfig:
    values = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read(), str(path)))
    environ = os.environ if environ is None else environ
    for f in fields(PipelineConfig):
        env_key = ENV_PREFIX + f.name.upper()
        if env_key in environ:
            values[f.name] = _coerce(f.name, environ[env_key])
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = _coerce(key, value) if isinstance(value, str) else value
    return dataclasses.replace(PipelineConfig(), **values)
