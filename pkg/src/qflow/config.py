"""Run configuration: parsing, validation, derived constants and hashing."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .curvature import PrescribingFunction
from .forms import ModelParams, gamma_from_sigma, polyakov_liouville_rho, q_round_total
from .spectral import FieldCoeffs, TorusGeometry, a_n_constant
from .stochastic import sigma_bound


class ConfigError(ValueError):
    """Configuration rejected; the CLI maps it to exit code 2."""


@dataclass
class GeometryBlock:
    n: int = 2
    L: float = 2 * math.pi
    grid: int = 64
    trunc: int = 8
    q_ref_const: float = 0.0


@dataclass
class ModelBlock:
    flavor: str = "NQF"
    sigma: float = 1.0
    rho: float = 1.0
    f: object = 1.0
    gamma: float | None = None


@dataclass
class SchemeBlock:
    dt: float = 1e-3
    T: float = 1.0
    scheme: str = "imex"
    clamp_floor: float = 1e-12
    window_eps: float = 1e-3


@dataclass
class ExperimentBlock:
    checks: list = field(default_factory=list)
    reps: int = 1000
    seed: int = 0


@dataclass
class OutputBlock:
    path: str | None = None
    cadence: int = 10
    formats: list = field(default_factory=lambda: ["json"])


@dataclass
class RunConfig:
    geometry: GeometryBlock = field(default_factory=GeometryBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    scheme: SchemeBlock = field(default_factory=SchemeBlock)
    experiment: ExperimentBlock = field(default_factory=ExperimentBlock)
    output: OutputBlock = field(default_factory=OutputBlock)
    derived: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    status: str = "ok"

    def to_dict(self, with_derived: bool = False) -> dict:
        d = asdict(self)
        if not with_derived:
            for key in ("derived", "warnings", "status"):
                d.pop(key)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def geom(self) -> TorusGeometry:
        g = self.geometry
        return TorusGeometry(g.n, g.L, g.grid, g.trunc, g.q_ref_const)

    def prescribing(self, geom: TorusGeometry | None = None) -> PrescribingFunction:
        geom = self.geom() if geom is None else geom
        return PrescribingFunction.build(geom, build_f(geom, self.model.f))

    def model_params(self) -> ModelParams:
        geom = self.geom()
        return ModelParams(geom, self.model.sigma, self.prescribing(geom), self.model.rho)


_BLOCKS = {"geometry": GeometryBlock, "model": ModelBlock, "scheme": SchemeBlock,
           "experiment": ExperimentBlock, "output": OutputBlock}


def build_f(geom: TorusGeometry, spec) -> FieldCoeffs:
    """f from a constant or {"const": c, "modes": [[k..., "cos"|"sin", amplitude], ...]}."""
    if isinstance(spec, (int, float)):
        return FieldCoeffs.constant(geom, float(spec))
    if not isinstance(spec, dict):
        raise ConfigError("f must be a number or a mode-list object")
    out = FieldCoeffs.constant(geom, float(spec.get("const", 0.0)))
    for mode in spec.get("modes", []):
        *k, kind, amp = mode
        try:
            out = out + FieldCoeffs.trig_mode(geom, k, kind, float(amp))
        except ValueError as exc:
            raise ConfigError(f"bad f mode {mode}: {exc}") from exc
    return out


def parse_config(source) -> RunConfig:
    """From a dict, a JSON string, or a path to a JSON file."""
    if isinstance(source, RunConfig):
        return copy.deepcopy(source)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        try:
            source = Path(source).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
    if isinstance(source, str):
        try:
            source = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"unparseable config: {exc}") from exc
    if not isinstance(source, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(source) - set(_BLOCKS) - {"derived", "warnings", "status"}
    if unknown:
        raise ConfigError(f"unknown config blocks: {sorted(unknown)}")
    kw = {}
    for name, cls in _BLOCKS.items():
        block = source.get(name, {})
        try:
            kw[name] = cls(**block)
        except TypeError as exc:
            raise ConfigError(f"bad {name} block: {exc}") from exc
    return RunConfig(**kw)


def validate_config(cfg) -> RunConfig:
    """Normalize a config and attach derived constants.

    Hard errors: odd n, grid < 2 trunc, inconsistent gamma, wrong sign of f.
    A sigma at or above the bound downgrades the run to exploratory status.
    """
    cfg = parse_config(cfg)
    g, m = cfg.geometry, cfg.model
    if g.n <= 0 or g.n % 2:
        raise ConfigError(f"dimension must be even and positive, got n={g.n}")
    if g.trunc < 1 or g.grid < 2 * g.trunc:
        raise ConfigError(f"grid {g.grid} must be at least 2 * trunc = {2 * g.trunc}")
    if g.grid < 2 * g.trunc + 2 or g.grid & (g.grid - 1):
        raise ConfigError(f"grid {g.grid} must be a power of two with room for trunc {g.trunc} (grid >= 2 trunc + 2)")
    if g.L <= 0:
        raise ConfigError("L must be positive")
    if m.flavor not in ("NQF", "LQF"):
        raise ConfigError(f"unknown flavor {m.flavor!r}")
    if m.sigma <= 0:
        raise ConfigError("sigma must be positive")
    a_n = a_n_constant(g.n)
    gamma = gamma_from_sigma(g.n, a_n, m.sigma)
    if m.gamma is not None and not math.isclose(m.gamma, gamma, rel_tol=1e-9):
        raise ConfigError(f"gamma {m.gamma} inconsistent with sigma (derived gamma = {gamma:.12g})")
    m.gamma = gamma
    geom = cfg.geom()
    f = cfg.prescribing(geom)
    try:
        f.require(m.flavor)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    bound = sigma_bound(g.n)
    q_r = q_round_total(g.n)
    q_total = geom.q_ref_total
    warnings = []
    status = "ok"
    if m.sigma ** 2 >= bound:
        status = "exploratory"
        warnings.append(f"sigma^2 = {m.sigma ** 2:.6g} is not below the bound {bound:.6g}")
    kappa = 2 * q_total / (g.n * m.sigma ** 2)
    lam = m.rho * kappa
    moment_cap = 2 * g.n / gamma ** 2
    margin = (q_r - q_total) if m.flavor == "NQF" else (q_r / m.rho - q_total)
    if margin <= 0:
        warnings.append("moment condition (A2/A2') violated: symmetrizing marginal not normalizable")
    rho_pl = polyakov_liouville_rho(g.n, a_n, m.sigma)
    cfg.derived = {
        "a_n": a_n, "gamma": gamma, "sigma_bound": bound, "q_round_total": q_r,
        "q_ref_total": q_total, "v_ref": geom.vol, "moment_exponent": kappa if m.flavor == "NQF" else lam,
        "moment_cap": moment_cap, "moment_margin": margin, "f_sign": f.sign_class,
        "polyakov_liouville_rho": rho_pl,
        "polyakov_liouville": bool(math.isclose(m.rho, rho_pl, rel_tol=1e-9)),
        "feller_flag": bool(2 * (-g.q_ref_const) * m.rho * geom.vol >= m.sigma ** 2),
        "feller_exact": bool(2 * (-g.q_ref_const) * m.rho * geom.vol >= g.n * m.sigma ** 2),
        "f_min": float(np.min(f.values)), "f_max": float(np.max(f.values)),
    }
    cfg.warnings = warnings
    cfg.status = status
    return cfg


def reference_config(seed: int = 0) -> RunConfig:
    """Configuration used by the acceptance suite."""
    return validate_config({"experiment": {"seed": seed}})
