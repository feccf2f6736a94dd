"""Run configuration loaded from TOML.

Every key has a default; unknown keys are rejected so typos fail loudly.
Angles in the file are given in degrees.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .control import ControlGains
from .errors import ConfigError
from .geometry import FanSpec
from .registration import RegistrationConfig
from .worldsim import PatientParams

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

SCHEMA_VERSION = 1

DEFAULT_ER_LIST = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class RunConfig:
    gains: ControlGains = field(default_factory=ControlGains)
    fan: FanSpec = field(default_factory=FanSpec)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    patient_params: PatientParams = field(default_factory=PatientParams)
    chain_path: str = ""  # empty: bundled default arm
    voxel_mm: float = 1.0
    dt: float = 0.01
    damping: float = 1e-2
    k_contact: float = 3.0
    seed: int = 0
    patients: int = 15
    offsets: int = 5
    offset_range_mm: float = 20.0
    er_list: tuple = DEFAULT_ER_LIST
    efficiency_er: float = 0.6
    template_subjects: int = 20
    template_sample_k: int = 2048
    template_seed: int = 10_000
    anchor_depth_mm: float = 80.0
    alpha: float = 0.05
    workers: int = 0  # 0: one per available CPU

    def __post_init__(self):
        if not 0 < self.dt <= 0.1:
            raise ConfigError("dt must lie in (0, 0.1]")
        if self.voxel_mm <= 0:
            raise ConfigError("voxel_mm must be positive")
        if any(not 0.0 <= er <= 1.0 for er in self.er_list):
            raise ConfigError("er_list entries must lie in [0, 1]")
        if 1.0 not in self.er_list:
            raise ConfigError("er_list must contain 1.0, the reference ratio")
        if self.patients < 0 or self.offsets < 1:
            raise ConfigError("patients must be >= 0 and offsets >= 1")

    def to_dict(self):
        d = asdict(self)
        d["er_list"] = list(self.er_list)
        return d

    def digest(self):
        """Short hash of the configuration, recorded in output files.

        ``workers`` is left out since it does not change any result.
        """
        d = self.to_dict()
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {
    "gains": ControlGains,
    "fan": FanSpec,
    "registration": RegistrationConfig,
    "patient": PatientParams,
}
# keys given in degrees in the file but stored in radians
_DEGREE_KEYS = {
    "gains": {"theta_rate": "theta_rate_deg", "theta_max": "theta_max_deg"},
    "registration": {"theta_max": "theta_max_deg"},
}


def _section(name, cls, raw):
    deg = _DEGREE_KEYS.get(name, {})
    allowed = {f.name for f in fields(cls) if f.init}
    file_keys = (allowed - set(deg)) | set(deg.values())
    unknown = set(raw) - file_keys
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    kw = {}
    for key, val in raw.items():
        inner = next((k for k, v in deg.items() if v == key), None)
        if inner is not None:
            kw[inner] = math.radians(float(val))
        elif isinstance(val, list):
            kw[key] = tuple(val)
        else:
            kw[key] = val
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def config_from_dict(data) -> RunConfig:
    data = dict(data)
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    kw = {}
    for name, cls in _SECTIONS.items():
        raw = data.pop(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"[{name}] must be a table")
        kw["patient_params" if name == "patient" else name] = _section(name, cls, raw)
    top = {f.name for f in fields(RunConfig)} - {"gains", "fan", "registration", "patient_params"}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for key, val in data.items():
        kw[key] = tuple(val) if isinstance(val, list) else val
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, **overrides) -> RunConfig:
    cfg = RunConfig() if path is None else config_from_dict(tomllib.loads(Path(path).read_text()))
    return replace(cfg, **overrides) if overrides else cfg
