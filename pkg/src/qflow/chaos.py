"""Co-polyharmonic Gaussian multiplicative chaos on the grid, moments, and inversion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fields import CgfSample, hat_profile, sample_cgf
from .spectral import FieldCoeffs, TorusGeometry, green_kernel_grid

MASS_FLOOR = 1e-300


@dataclass
class GridMeasure:
    """Positive measure given by cell masses; leading axes of ``masses`` are batch axes."""

    masses: np.ndarray
    geom: TorusGeometry

    def total(self):
        return self.integrate(1.0)

    def integrate(self, values):
        """omega(h) for grid values ``h`` (broadcast against the masses)."""
        ax = tuple(range(-self.geom.n, 0))
        out = np.sum(self.masses * values, axis=ax)
        return float(out) if np.ndim(out) == 0 else out

    def density(self) -> np.ndarray:
        """Radon-Nikodym density with respect to the reference volume."""
        return self.masses / self.geom.cell_vol


@dataclass
class GmcMeasure:
    cells: GridMeasure
    gamma: float
    trunc: int
    counterterm: float
    shift_c: float = 0.0

    @property
    def masses(self) -> np.ndarray:
        return self.cells.masses

    def total(self):
        return self.cells.total()


def check_gamma(n: int, gamma: float) -> None:
    if gamma < 0 or gamma >= math.sqrt(2 * n):
        raise ValueError(f"supercritical gamma: need 0 <= gamma < sqrt(2n) = {math.sqrt(2 * n):.6g}, got {gamma}")


def counterterm(geom: TorusGeometry, gamma: float) -> float:
    """(gamma^2 / 2) Var psi_N(x)."""
    return 0.5 * gamma ** 2 * geom.green_variance()


def gmc_masses(geom: TorusGeometry, psi_grid: np.ndarray, gamma: float, shift_c=0.0,
               ground_density: np.ndarray | None = None) -> np.ndarray:
    """Cell masses cellvol * exp(gamma (psi + c) - counterterm), batched over leading axes.

    With a ground density lambda the field is lambda * psi and the measure is
    lambda * omega_ref, renormalized pointwise by the modified variance.
    """
    shift = np.asarray(shift_c, dtype=float)
    shift = shift.reshape(shift.shape + (1,) * geom.n)
    if ground_density is None:
        return geom.cell_vol * np.exp(gamma * (psi_grid + shift) - counterterm(geom, gamma))
    lam = np.asarray(ground_density, dtype=float)
    var = geom.green_variance()
    return geom.cell_vol * lam * np.exp(gamma * (lam * psi_grid + shift) - 0.5 * gamma ** 2 * lam ** 2 * var)


def build_gmc(geom: TorusGeometry, psi: CgfSample | FieldCoeffs, gamma: float, shift_c: float = 0.0,
              ground_density: np.ndarray | None = None) -> GmcMeasure:
    check_gamma(geom.n, gamma)
    f = psi.field if isinstance(psi, CgfSample) else psi
    masses = gmc_masses(geom, f.grid(), gamma, shift_c, ground_density)
    return GmcMeasure(GridMeasure(masses, geom), gamma, geom.N, counterterm(geom, gamma), shift_c)


def gmc_shift(geom: TorusGeometry, m: GmcMeasure, h: FieldCoeffs) -> GmcMeasure:
    """Cameron-Martin shift: multiply cell masses by exp(gamma h)."""
    masses = m.masses * np.exp(m.gamma * h.grid())
    return GmcMeasure(GridMeasure(masses, geom), m.gamma, m.trunc, m.counterterm, m.shift_c)


# ------------------------------------------------------------------ moments
def gmc_second_moment_oracle(geom: TorusGeometry, gamma: float) -> float:
    """E[M(1)^2] for the grid measure: sum over cell pairs of cellvol^2 exp(gamma^2 k_N(x - y))."""
    k = green_kernel_grid(geom)
    return float(geom.vol * geom.cell_vol * np.sum(np.exp(gamma ** 2 * k)))


def moment_growth_exponent(n: int, gamma: float, p: float) -> float:
    """Predicted growth exponent of E[M(1)^p] in the cutoff N (zero below the moment threshold)."""
    zeta = (n + gamma ** 2 / 2) * p - gamma ** 2 * p ** 2 / 2
    return max(0.0, n - zeta)


@dataclass
class MomentRow:
    p: float
    N: int
    estimate: float
    se: float
    exact: float | None = None


@dataclass
class MomentScan:
    gamma: float
    rows: list[MomentRow]
    threshold: float
    slopes: dict = field(default_factory=dict)
    blowup: dict = field(default_factory=dict)

    def table(self, p: float) -> list[MomentRow]:
        return [r for r in self.rows if r.p == p]


def total_mass_samples(geom: TorusGeometry, gamma: float, reps: int, rng: np.random.Generator,
                       chunk: int = 2000) -> np.ndarray:
    out = np.empty(reps)
    for start in range(0, reps, chunk):
        size = min(chunk, reps - start)
        psi = sample_cgf(geom, rng, size)
        out[start:start + size] = geom.quadrature(np.exp(gamma * psi.grid() - counterterm(geom, gamma)))
    return out


def gmc_moment_scan(geom: TorusGeometry, gamma: float, p_list: Sequence[float], reps: int,
                    rng: np.random.Generator, N_list: Sequence[int] | None = None,
                    slope_trigger: float = 0.1) -> MomentScan:
    """Empirical E[M(1)^p] with standard errors across truncations.

    For p = 2 the exact grid oracle is attached to each row and drives the
    growth diagnostic; other orders use the Monte Carlo log-log slope.
    """
    if reps < 1000:
        raise ValueError("moment scan needs at least 1000 replicas")
    check_gamma(geom.n, gamma)
    N_list = [geom.N] if N_list is None else list(N_list)
    rows = []
    for N in N_list:
        g = geom.with_(N=N)
        mass = total_mass_samples(g, gamma, reps, rng)
        for p in p_list:
            vals = mass ** p
            exact = gmc_second_moment_oracle(g, gamma) if p == 2 else None
            if p == 0:
                exact = 1.0
            elif p == 1:
                exact = g.vol
            rows.append(MomentRow(float(p), N, float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(reps)), exact))
    scan = MomentScan(gamma, rows, 2 * geom.n / gamma ** 2 if gamma > 0 else math.inf)
    if len(N_list) > 1:
        logN = np.log(N_list)
        for p in p_list:
            tab = scan.table(float(p))
            vals = [r.exact if r.exact is not None else r.estimate for r in tab]
            slope = float(np.polyfit(logN, np.log(vals), 1)[0])
            scan.slopes[float(p)] = slope
            scan.blowup[float(p)] = slope > slope_trigger
    return scan


# ---------------------------------------------------------------- inversion
@dataclass
class InversionPlan:
    eps_list: Sequence[float]
    eta: Callable = hat_profile
    mc_reps: int = 200
    F_const: dict = field(default_factory=dict)

    def window(self, geom: TorusGeometry, eps: float) -> np.ndarray:
        """eta_eps(x) on the grid, normalized to unit quadrature."""
        if eps <= 2 * geom.L / geom.G:
            raise ValueError(f"inversion radius {eps:.4g} must exceed two grid cells ({2 * geom.L / geom.G:.4g})")
        x = geom.grid_coords()
        d = np.minimum(x, geom.L - x)
        w = self.eta(np.sqrt(np.sum(d ** 2, axis=0)) / eps)
        if np.any(w < 0):
            raise ValueError("inversion profile must be nonnegative")
        return w / geom.quadrature(w)


def smallest_admissible_eps(geom: TorusGeometry, margin: float = 1.01) -> float:
    return margin * 2 * geom.L / geom.G


def window_masses(geom: TorusGeometry, masses: np.ndarray, window: np.ndarray) -> np.ndarray:
    """(eta_eps * m)(x) = sum_y eta_eps(x - y) m_y, by FFT, batched."""
    ax = tuple(range(-geom.n, 0))
    spec = np.fft.rfftn(masses, axes=ax) * np.fft.rfftn(window, axes=ax)
    return np.fft.irfftn(spec, s=geom.grid_shape, axes=ax)


def _log_windows(geom, masses, window, gamma):
    conv = window_masses(geom, masses, window)
    # FFT round-off can leave tiny negative values where the true window mass is zero
    tol = 1e-13 * np.max(np.abs(conv), axis=tuple(range(-geom.n, 0)), keepdims=True)
    if np.any(conv <= tol):
        raise ValueError("degenerate measure for inversion")
    hits = int(np.sum(conv < MASS_FLOOR))
    return np.log(np.maximum(conv, MASS_FLOOR)) / gamma, hits


def estimate_counterterm(geom: TorusGeometry, gamma: float, plan: InversionPlan, rng: np.random.Generator,
                         base_point: Sequence[int] | None = None,
                         ground_density: np.ndarray | None = None, chunk: int = 500) -> dict:
    """Monte Carlo counter-term F(eps) = E[(1/gamma) log(eta_eps * M(psi'))].

    Returns, per eps, the estimate at ``base_point`` with its standard error and
    the pointwise mean over the grid (a function when the ground density varies).
    """
    check_gamma(geom.n, gamma)
    base = tuple(base_point) if base_point is not None else (0,) * geom.n
    out = {}
    for eps in plan.eps_list:
        win = plan.window(geom, eps)
        vals, total = [], np.zeros(geom.grid_shape)
        for start in range(0, plan.mc_reps, chunk):
            size = min(chunk, plan.mc_reps - start)
            psi = sample_cgf(geom, rng, size)
            logw, _ = _log_windows(geom, gmc_masses(geom, psi.grid(), gamma, 0.0, ground_density), win, gamma)
            vals.append(logw[(Ellipsis,) + base])
            total += logw.sum(axis=0)
        vals = np.concatenate(vals)
        grid_mean = total / plan.mc_reps
        out[float(eps)] = {
            "F": float(vals.mean()),
            "se": float(vals.std(ddof=1) / math.sqrt(len(vals))),
            "F_grid": grid_mean if ground_density is not None else float(grid_mean.mean()),
        }
    plan.F_const.update({k: v["F_grid"] for k, v in out.items()})
    return out


@dataclass
class InversionResult:
    field: FieldCoeffs
    eps: float
    floor_hits: int


def invert_gmc(geom: TorusGeometry, m: GmcMeasure, plan: InversionPlan, eps: float | None = None) -> InversionResult:
    """Recover the field r = (1/gamma) log(eta_eps * m) - F(eps) as truncated coefficients.

    The zero mode is kept so deterministic shifts are visible; call ``.ground()``
    on the result for the grounded field.
    """
    eps = float(min(plan.eps_list) if eps is None else eps)
    if m.gamma <= 0:
        raise ValueError("inversion requires gamma > 0")
    if eps not in plan.F_const:
        raise ValueError(f"no counter-term estimated for eps={eps}")
    logw, hits = _log_windows(geom, m.masses, plan.window(geom, eps), m.gamma)
    r = logw - plan.F_const[eps]
    return InversionResult(FieldCoeffs.from_grid(geom, r), eps, hits)
