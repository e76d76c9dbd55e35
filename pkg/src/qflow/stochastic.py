"""Stochastic NQF/LQF as a measure-valued SDE on grid cell masses.

The state is the vector of cell masses m_i of omega_t. One Euler-Maruyama step
adds the drift of the volume-form equation and independent per-cell noise
n sigma sqrt(m_i dt) zeta_i, so that for grid functions h1, h2

    d<omega(h1), omega(h2)> = n^2 sigma^2 omega(h1 h2) dt.

Every function accepts leading batch axes on the masses (independent paths).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .curvature import PrescribingFunction, mass_rhs
from .rng import provenance
from .spectral import FieldCoeffs, TorusGeometry

FLOOR_RELATIVE = 1e-12
V_FLOOR, V_CEIL = 1e-8, 1e8
UNRELIABLE_FLOOR_FRACTION = 0.01


def sigma_bound(n: int) -> float:
    """Strict upper bound on sigma^2: 2 (4 pi)^(n/2) (n/2 - 1)! / n."""
    return 2 * (4 * math.pi) ** (n // 2) * math.factorial(n // 2 - 1) / n


@dataclass
class MeasureState:
    """Cell masses of omega_t (leading axes index independent paths)."""

    masses: np.ndarray
    geom: TorusGeometry
    t: float = 0.0
    alive: np.ndarray | bool = True

    @classmethod
    def from_phi(cls, geom: TorusGeometry, phi: FieldCoeffs | np.ndarray, batch: tuple = ()) -> "MeasureState":
        grid = phi.grid() if isinstance(phi, FieldCoeffs) else np.asarray(phi, dtype=float)
        m = geom.cell_vol * np.exp(geom.n * grid)
        m = np.broadcast_to(m, batch + geom.grid_shape).copy()
        return cls(m, geom, 0.0, np.ones(batch, dtype=bool) if batch else True)

    @classmethod
    def uniform(cls, geom: TorusGeometry, volume: float, batch: tuple = ()) -> "MeasureState":
        m = np.full(batch + geom.grid_shape, volume / geom.G ** geom.n)
        return cls(m, geom, 0.0, np.ones(batch, dtype=bool) if batch else True)

    @property
    def volume(self):
        out = self.masses.sum(axis=tuple(range(-self.geom.n, 0)))
        return float(out) if np.ndim(out) == 0 else out

    @property
    def phi_grid(self) -> np.ndarray:
        floor = FLOOR_RELATIVE * self.geom.cell_vol
        return np.log(np.maximum(self.masses, floor) / self.geom.cell_vol) / self.geom.n

    def integrate(self, h: np.ndarray):
        out = np.sum(self.masses * h, axis=tuple(range(-self.geom.n, 0)))
        return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SdeScheme:
    dt: float
    noise_mode: str = "cellwise"
    clamp_floor: float = FLOOR_RELATIVE
    dealias_pad: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.clamp_floor < 0:
            raise ValueError("clamp floor must be nonnegative")
        if self.noise_mode != "cellwise":
            raise ValueError(f"unsupported noise mode {self.noise_mode!r}; only 'cellwise' is implemented")


@dataclass
class FlowParams:
    which: str
    f: PrescribingFunction
    sigma: float
    scheme: SdeScheme
    rho: float = 1.0


@dataclass
class StepDiagnostics:
    floor_hits: np.ndarray
    killed: np.ndarray


def drift_masses(geom: TorusGeometry, which: str, masses: np.ndarray, f: PrescribingFunction,
                 rho: float = 1.0, floor: float = FLOOR_RELATIVE) -> np.ndarray:
    """Per-cell drift of the volume-form equation (batched)."""
    m = np.maximum(masses, floor * geom.cell_vol)
    if m.ndim == geom.n:
        return mass_rhs(geom, which, m, f, rho)
    phi = np.log(m / geom.cell_vol) / geom.n
    pphi = geom.grid_apply(phi, "P")
    if which == "NQF":
        ax = tuple(range(-geom.n, 0))
        wf = np.sum(masses * f.values, axis=ax).reshape(m.shape[:-geom.n] + (1,) * geom.n)
        return -geom.n * (geom.cell_vol * (pphi + geom.q_ref_const) - geom.q_ref_total * f.values * masses / wf)
    return -geom.n * (geom.cell_vol * (pphi + rho * geom.q_ref_const) - f.values * masses)


def projected_drift(geom: TorusGeometry, which: str, masses: np.ndarray, f: PrescribingFunction, h: np.ndarray,
                    rho: float = 1.0) -> np.ndarray:
    """Drift of omega_t(h) from the projected SDE, by quadrature."""
    st = MeasureState(masses, geom)
    pphi = geom.grid_apply(st.phi_grid, "P")
    ref = geom.quadrature(h * pphi)
    q_ref = geom.q_ref_const if which == "NQF" else rho * geom.q_ref_const
    ref = ref + q_ref * geom.quadrature(h * np.ones(geom.grid_shape))
    wfh = st.integrate(f.values * h)
    if which == "NQF":
        return -geom.n * (ref - geom.q_ref_total / st.integrate(f.values) * wfh)
    return -geom.n * (ref - wfh)


def _clamp_conservative(geom: TorusGeometry, m: np.ndarray, floor: float):
    """Lift cells to the floor and take the added mass from the other cells in proportion."""
    ax = tuple(range(-geom.n, 0))
    low = m < floor
    hits = low.sum(axis=ax)
    if not np.any(hits):
        return m, hits
    target = m.sum(axis=ax, keepdims=True)
    lifted = np.where(low, floor, m)
    above = np.where(low, 0.0, lifted - floor)
    spare = above.sum(axis=ax, keepdims=True)
    n_floor = m.shape[-1] ** geom.n * floor
    need = target - n_floor
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(spare > 0, np.clip(need / spare, 0.0, None), 0.0)
    return floor + above * scale, hits


def stochastic_step(geom: TorusGeometry, which: str, state: MeasureState, f: PrescribingFunction, rho: float,
                    sigma: float, scheme: SdeScheme, rng: np.random.Generator) -> tuple[MeasureState, StepDiagnostics]:
    """One Euler-Maruyama step for every live path.

    Cells pushed below the floor are lifted back and the excess is taken from
    the remaining cells, so the total volume increment is exactly the summed
    drift plus noise. Paths whose volume leaves [V_floor, V_ceil] * V_ref move
    to the cemetery and stay frozen.
    """
    if sigma ** 2 >= sigma_bound(geom.n):
        warnings.warn("sigma^2 is at or above the continuum bound; the scheme still runs", RuntimeWarning)
    m = state.masses
    dt = scheme.dt
    floor = scheme.clamp_floor * geom.cell_vol
    drift = drift_masses(geom, which, m, f, rho, scheme.clamp_floor)
    noise = geom.n * sigma * np.sqrt(np.maximum(m, 0.0) * dt) * rng.standard_normal(m.shape)
    new = m + drift * dt + noise
    if not np.all(np.isfinite(new)):
        raise FloatingPointError("non-finite cell mass")
    new, hits = _clamp_conservative(geom, new, floor)
    ax = tuple(range(-geom.n, 0))
    vol = (m + drift * dt + noise).sum(axis=ax)
    alive = np.asarray(state.alive, dtype=bool) & (vol > V_FLOOR * geom.vol) & (vol < V_CEIL * geom.vol)
    was_alive = np.asarray(state.alive, dtype=bool)
    mask = was_alive.reshape(was_alive.shape + (1,) * geom.n)
    new = np.where(mask, new, m)
    killed = was_alive & ~alive
    alive_out = alive if np.ndim(alive) else bool(alive)
    return (MeasureState(new, geom, state.t + dt, alive_out),
            StepDiagnostics(np.where(was_alive, hits, 0), killed))


@dataclass
class FlowRecord:
    """Persisted time series of (an ensemble of) stochastic flow paths."""

    which: str
    times: np.ndarray
    volume: np.ndarray
    pairings: np.ndarray
    cemetery_time: np.ndarray
    floor_fraction: float
    params: dict
    provenance: dict
    final: MeasureState | None = None
    flags: list = field(default_factory=list)

    @property
    def reliable(self) -> bool:
        return self.floor_fraction <= UNRELIABLE_FLOOR_FRACTION


def run_flow(geom: TorusGeometry, which: str, init: MeasureState, params: FlowParams, T: float,
             cadence: int, rng: np.random.Generator, test_functions=(), seed_path: tuple = (0,)) -> FlowRecord:
    """Simulate to time T, recording V_t and omega_t(h_j) every ``cadence`` steps."""
    params.f.require(which)
    tests = [h.grid() if isinstance(h, FieldCoeffs) else np.broadcast_to(np.asarray(h, float), geom.grid_shape)
             for h in test_functions]
    steps = int(round(T / params.scheme.dt))
    state = init
    batch = init.masses.shape[:-geom.n]
    cemetery = np.full(batch, np.nan)
    times, vols, pairs = [0.0], [np.asarray(state.volume)], [[state.integrate(h) for h in tests]]
    floor_hits = 0
    live_cells = 0
    for i in range(1, steps + 1):
        live_cells += int(np.sum(np.asarray(state.alive))) * geom.G ** geom.n
        state, diag = stochastic_step(geom, which, state, params.f, params.rho, params.sigma, params.scheme, rng)
        floor_hits += int(np.sum(diag.floor_hits))
        cemetery = np.where(diag.killed, i * params.scheme.dt, cemetery)
        if i % cadence == 0 or i == steps:
            times.append(i * params.scheme.dt)
            vols.append(np.where(np.asarray(state.alive), state.volume, 0.0))
            pairs.append([state.integrate(h) for h in tests])
    frac = floor_hits / max(live_cells, 1)
    record = FlowRecord(
        which=which, times=np.array(times), volume=np.array(vols),
        pairings=np.array(pairs, dtype=float), cemetery_time=cemetery, floor_fraction=frac,
        params={"sigma": params.sigma, "rho": params.rho, "dt": params.scheme.dt, "T": T,
                "q_ref_const": geom.q_ref_const, "synthetic_background": geom.synthetic_background},
        provenance=provenance(*seed_path) if seed_path else {}, final=state)
    if frac > UNRELIABLE_FLOOR_FRACTION:
        record.flags.append("unreliable: floor hits above 1%")
    if params.sigma ** 2 >= sigma_bound(geom.n):
        record.flags.append("exploratory: sigma above bound")
    return record


def martingale_residuals(geom: TorusGeometry, which: str, init: MeasureState, params: FlowParams, steps: int,
                         rng: np.random.Generator, test_functions) -> np.ndarray:
    """Normalized increments of the projected weak equation, shape (steps, paths, tests).

    (omega_{t+dt}(h) - omega_t(h) - drift_h dt) / (n sigma sqrt(omega_t(h^2) dt)) is a
    standard normal given the past for every live path.
    """
    tests = np.stack([h.grid() if isinstance(h, FieldCoeffs) else np.broadcast_to(np.asarray(h, float), geom.grid_shape)
                      for h in test_functions])
    ax = tuple(range(-geom.n, 0))
    dt = params.scheme.dt
    state = init
    out = []
    for _ in range(steps):
        m = state.masses
        drift = drift_masses(geom, which, m, params.f, params.rho, params.scheme.clamp_floor)
        before = np.stack([np.sum(m * h, axis=ax) for h in tests], axis=-1)
        mean = np.stack([np.sum(drift * h, axis=ax) for h in tests], axis=-1) * dt
        scale = geom.n * params.sigma * np.sqrt(np.stack([np.sum(m * h ** 2, axis=ax) for h in tests], axis=-1) * dt)
        state, _ = stochastic_step(geom, which, state, params.f, params.rho, params.sigma, params.scheme, rng)
        after = np.stack([np.sum(state.masses * h, axis=ax) for h in tests], axis=-1)
        out.append((after - before - mean) / scale)
    return np.array(out)
