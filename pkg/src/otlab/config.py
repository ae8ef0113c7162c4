"""Experiment configuration: TOML file with one section per subcommand."""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

FIXTURE_PACKAGE_DIR = "fixtures"


@dataclass
class GridSpec:
    n: int = 64
    dim: int = 2
    lower: float = -1.0
    upper: float = 1.0


@dataclass
class DensitySpec:
    """A synthetic family with parameters, or a file (``.csv`` grid or ``.pgm`` image)."""

    family: Optional[str] = None
    params: dict = field(default_factory=dict)
    file: Optional[str] = None
    value_range: tuple = (0.0, 1.0)


@dataclass
class SolverSpec:
    kind: str = "entropic"
    reg_rel: float = 1e-4
    tol: float = 1e-6
    max_iter: int = 20000


@dataclass
class TiltSpec:
    theta: float = 0.25
    beta: float = 0.5
    eps_step: float = 0.1
    n_bins: int = 64
    stage_cells: Optional[int] = 64
    flux_method: str = "eulerian"


@dataclass
class BallSpec:
    center: list = field(default_factory=lambda: [0.0, 0.0])
    R: float = 0.5


@dataclass
class IterateSpec(BallSpec):
    K: int = 3
    alpha: float = 0.5


@dataclass
class SeminormSpec(BallSpec):
    alpha: float = 0.5
    r_min: Optional[float] = None


@dataclass
class CertifySpec(BallSpec):
    R: float = 0.25
    alpha: float = 0.5
    eps_cal: Optional[float] = None


@dataclass
class ScanSpec:
    lower: list = field(default_factory=lambda: [-0.5, -0.5])
    upper: list = field(default_factory=lambda: [0.5, 0.5])
    ladder: list = field(default_factory=lambda: [0.25])
    alpha: float = 0.5
    eps_cal: Optional[float] = None


@dataclass
class CalibrationEntry:
    """One calibration instance: a fixture config plus a scan window.

    ``ladder`` defaults to the fixture's own scan ladder. ``source`` and
    ``target`` override density parameters of the fixture. A ``bad_band``
    ``[offset, halfwidth]`` marks the fixture as singular.
    """

    fixture: str
    lower: list
    upper: list
    ladder: Optional[list] = None
    bad_band: Optional[list] = None
    source: dict = field(default_factory=dict)
    target: dict = field(default_factory=dict)


@dataclass
class CalibrateSpec:
    target_coverage: float = 0.95
    lo: float = 1e-6
    hi: float = 1.0
    iterations: int = 40
    instances: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    source: DensitySpec = field(default_factory=lambda: DensitySpec("uniform"))
    target: DensitySpec = field(default_factory=lambda: DensitySpec("uniform"))
    solver: SolverSpec = field(default_factory=SolverSpec)
    tilt: TiltSpec = field(default_factory=TiltSpec)
    iterate: IterateSpec = field(default_factory=IterateSpec)
    seminorm: SeminormSpec = field(default_factory=SeminormSpec)
    certify: CertifySpec = field(default_factory=CertifySpec)
    scan: ScanSpec = field(default_factory=ScanSpec)
    calibrate: CalibrateSpec = field(default_factory=CalibrateSpec)
    base_dir: Optional[str] = field(default=None, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p

    def validate(self) -> "ExperimentConfig":
        for name, val in (("tilt.theta", self.tilt.theta), ("tilt.beta", self.tilt.beta)):
            _open_unit(name, val)
        for name, sec in (("iterate", self.iterate), ("seminorm", self.seminorm), ("certify", self.certify), ("scan", self.scan)):
            _open_unit(f"{name}.alpha", sec.alpha)
        if self.iterate.K < 1:
            raise ConfigError("iterate.K must be at least 1")
        if self.grid.dim not in (1, 2) or self.grid.n < 2 or not self.grid.upper > self.grid.lower:
            raise ConfigError("grid needs dim in {1, 2}, n >= 2 and upper > lower")
        if self.solver.kind not in ("exact", "entropic", "separable"):
            raise ConfigError(f"unknown solver kind {self.solver.kind!r}")
        for spec in (self.source, self.target):
            if (spec.family is None) == (spec.file is None):
                raise ConfigError("each density needs exactly one of 'family' or 'file'")
            if spec.file is not None and not self.resolve(spec.file).exists():
                raise ConfigError(f"density file {spec.file} does not exist")
        return self


def _open_unit(name: str, value: float):
    if not 0 < value < 1:
        raise ConfigError(f"{name} = {value} must lie in (0, 1)")


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section [{where}] must be a table")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return cls(**data)


def _density(data: dict, where: str) -> DensitySpec:
    data = dict(data)
    fam, path = data.pop("family", None), data.pop("file", None)
    vr = tuple(data.pop("value_range", (0.0, 1.0)))
    return DensitySpec(fam, data, path, vr)


def config_from_dict(data: dict, base_dir: Optional[str] = None) -> ExperimentConfig:
    data = dict(data)
    dens = data.pop("density", {})
    cfg = ExperimentConfig(base_dir=base_dir)
    if "source" in dens:
        cfg.source = _density(dens["source"], "density.source")
    if "target" in dens:
        cfg.target = _density(dens["target"], "density.target")
    simple = {
        "grid": GridSpec,
        "solver": SolverSpec,
        "tilt": TiltSpec,
        "iterate": IterateSpec,
        "seminorm": SeminormSpec,
        "certify": CertifySpec,
        "scan": ScanSpec,
    }
    for key, cls in simple.items():
        if key in data:
            setattr(cfg, key, _build(cls, data.pop(key), key))
    if "calibrate" in data:
        cal = dict(data.pop("calibrate"))
        entries = [_build(CalibrationEntry, e, "calibrate.instance") for e in cal.pop("instance", [])]
        cfg.calibrate = _build(CalibrateSpec, {**cal, "instances": entries}, "calibrate")
    if data:
        raise ConfigError(f"unknown sections: {sorted(data)}")
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        bundled = bundled_fixture_path(str(path))
        if bundled is None:
            raise ConfigError(f"config file {path} not found")
        p = bundled
    try:
        data = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return config_from_dict(data, base_dir=str(p.parent))


def bundled_fixture_path(name: str) -> Optional[Path]:
    """Path of a bundled fixture given its name (``"sinusoidal"``) or file name."""
    stem = name[:-5] if name.endswith(".toml") else name
    res = resources.files("otlab").joinpath(FIXTURE_PACKAGE_DIR, f"{stem}.toml")
    return Path(str(res)) if res.is_file() else None
