"""Q-curvature pairing, the energies E1/E2 and the deterministic NQF/LQF flows.

Conformal factors live on the quadrature grid. Operators act through the
truncated spectrum (project, multiply, transform back), which is self-adjoint
for the grid quadrature, so discrete energies and flow directions are exact
gradients of one another. Time stepping is done in cell-mass coordinates
m_i = cellvol * exp(n phi_i), where total volume is a linear functional.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .spectral import FieldCoeffs, TorusGeometry

FLOWS = ("NQF", "LQF")


@dataclass
class PrescribingFunction:
    """Prescribing function f with its grid values and verified sign class."""

    f: FieldCoeffs
    values: np.ndarray
    sign_class: str

    @classmethod
    def build(cls, geom: TorusGeometry, spec) -> "PrescribingFunction":
        """From a constant, a FieldCoeffs, or grid values."""
        if isinstance(spec, FieldCoeffs):
            coeffs = spec
        elif np.ndim(spec) == 0:
            coeffs = FieldCoeffs.constant(geom, float(spec))
        else:
            coeffs = FieldCoeffs.from_grid(geom, np.asarray(spec, dtype=float))
        values = coeffs.grid()
        if values.min() > 0:
            sign = "strictly_positive"
        elif values.max() <= 0:
            sign = "nonpositive"
        else:
            sign = "mixed"
        return cls(coeffs, values, sign)

    def require(self, which: str) -> None:
        if which == "NQF" and self.sign_class != "strictly_positive":
            raise ValueError("NQF requires a strictly positive prescribing function")
        if which == "LQF" and self.sign_class != "nonpositive":
            raise ValueError("LQF requires a nonpositive prescribing function")


@dataclass
class SmoothConformalState:
    """Conformal factor phi on the grid; omega = exp(n phi) omega_ref."""

    phi_grid: np.ndarray
    geom: TorusGeometry

    @classmethod
    def from_field(cls, phi: FieldCoeffs) -> "SmoothConformalState":
        return cls(phi.grid(), phi.geom)

    @classmethod
    def from_masses(cls, geom: TorusGeometry, masses: np.ndarray) -> "SmoothConformalState":
        return cls(np.log(masses / geom.cell_vol) / geom.n, geom)

    @property
    def phi(self) -> FieldCoeffs:
        return FieldCoeffs.from_grid(self.geom, self.phi_grid)

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.geom.n * self.phi_grid)

    @property
    def masses(self) -> np.ndarray:
        return self.geom.cell_vol * self.density

    @property
    def volume(self) -> float:
        return float(self.masses.sum())

    def p_phi(self) -> np.ndarray:
        return self.geom.grid_apply(self.phi_grid, "P")

    def q_function(self, q_ref: float | None = None) -> np.ndarray:
        """Q_t = exp(-n phi)(Q_ref + P_ref phi) on the grid."""
        q_ref = self.geom.q_ref_const if q_ref is None else q_ref
        return (q_ref + self.p_phi()) / self.density


def _grid_values(geom: TorusGeometry, h) -> np.ndarray:
    if isinstance(h, FieldCoeffs):
        return h.grid()
    return np.broadcast_to(np.asarray(h, dtype=float), geom.grid_shape)


def q_pairing(geom: TorusGeometry, state: SmoothConformalState, h) -> float:
    """Q_t(h) = omega_ref(Q_ref h + phi P_ref h)."""
    hv = _grid_values(geom, h)
    ph = geom.grid_apply(hv, "P")
    return geom.q_ref_const * geom.quadrature(hv) + geom.quadrature(state.phi_grid * ph)


def energy(geom: TorusGeometry, which: str, state: SmoothConformalState, f: PrescribingFunction,
           rho: float = 1.0) -> float:
    """E1 (NQF) or E2 (LQF, linear term scaled by rho) by grid quadrature."""
    phi = state.phi_grid
    quad = 0.5 * geom.quadrature(phi * state.p_phi())
    if which == "E1":
        wf = float(np.sum(state.masses * f.values))
        if wf <= 0:
            raise ValueError("nonpositive log argument in E1")
        return quad + geom.q_ref_const * geom.quadrature(phi) - geom.q_ref_total * math.log(wf) / geom.n
    if which == "E2":
        wf = float(np.sum(state.masses * f.values))
        return quad + rho * geom.q_ref_const * geom.quadrature(phi) - wf / geom.n
    raise ValueError(f"unknown energy {which!r}")


def flow_energy(which: str) -> str:
    return {"NQF": "E1", "LQF": "E2"}[which]


def flow_rhs(geom: TorusGeometry, which: str, state: SmoothConformalState, f: PrescribingFunction,
             rho: float = 1.0) -> np.ndarray:
    """d phi / dt on the grid: -(Q_t - Q(1) f / omega_t(f)) for NQF, -(Q_t - f) for LQF."""
    if which == "NQF":
        wf = float(np.sum(state.masses * f.values))
        if wf == 0:
            raise ValueError("omega_t(f) vanishes")
        return -(state.q_function() - geom.q_ref_total * f.values / wf)
    if which == "LQF":
        return -(state.q_function(rho * geom.q_ref_const) - f.values)
    raise ValueError(f"unknown flow {which!r}")


def mass_rhs(geom: TorusGeometry, which: str, masses: np.ndarray, f: PrescribingFunction,
             rho: float = 1.0) -> np.ndarray:
    """d m_i / dt written so the cellvol * (P phi + Q_ref) part carries no exp(-n phi) factor."""
    phi = np.log(masses / geom.cell_vol) / geom.n
    pphi = geom.grid_apply(phi, "P")
    if which == "NQF":
        wf = float(np.sum(masses * f.values))
        return -geom.n * (geom.cell_vol * (pphi + geom.q_ref_const) - geom.q_ref_total * f.values * masses / wf)
    return -geom.n * (geom.cell_vol * (pphi + rho * geom.q_ref_const) - f.values * masses)


class _ShiftedOperator:
    """diag(d) + P_N on grid functions, with a spectral preconditioner."""

    def __init__(self, geom: TorusGeometry, diag: np.ndarray):
        self.geom = geom
        self.diag = diag
        self.shape = (diag.size, diag.size)
        freqs = np.fft.fftfreq(geom.G, d=1.0 / geom.G)
        kk = np.stack(np.meshgrid(*([freqs] * geom.n), indexing="ij"))
        inband = np.all(np.abs(kk) <= geom.N, axis=0)
        lam = (2 * math.pi / geom.L) ** 2 * np.sum(kk ** 2, axis=0)
        self.precond = 1.0 / (diag.mean() + np.where(inband, lam ** (geom.n // 2), 0.0))

    def matvec(self, v):
        u = v.reshape(self.geom.grid_shape)
        return (self.diag * u + self.geom.grid_apply(u, "P")).ravel()

    def psolve(self, v):
        u = v.reshape(self.geom.grid_shape)
        return np.fft.ifftn(np.fft.fftn(u) * self.precond).real.ravel()

    def solve(self, b, tol=1e-13):
        A = LinearOperator(self.shape, matvec=self.matvec, dtype=float)
        M = LinearOperator(self.shape, matvec=self.psolve, dtype=float)
        x, info = cg(A, b.ravel(), rtol=tol, atol=0.0, M=M, maxiter=500)
        if info != 0:
            raise RuntimeError(f"linear solve did not converge (info={info})")
        return x.reshape(self.geom.grid_shape)


def imex_step(geom: TorusGeometry, which: str, masses: np.ndarray, f: PrescribingFunction, rho: float,
              dt: float) -> np.ndarray:
    """Linearly implicit Euler step: P_ref implicit, everything else frozen.

    Solves (exp(n phi)/dt + P) d_phi = -P phi - Q_ref' + c f exp(n phi) and sets
    m <- m (1 + n d_phi); the NQF volume is conserved exactly by construction.
    """
    dens = masses / geom.cell_vol
    phi = np.log(dens) / geom.n
    pphi = geom.grid_apply(phi, "P")
    if which == "NQF":
        coef = geom.q_ref_total / float(np.sum(masses * f.values))
        rhs = -pphi - geom.q_ref_const + coef * f.values * dens
    else:
        rhs = -pphi - rho * geom.q_ref_const + f.values * dens
    dphi = _ShiftedOperator(geom, dens / dt).solve(rhs)
    if which == "NQF":
        # remove the solver residual from the conserved direction
        dphi -= np.sum(masses * dphi) / masses.sum()
    return masses * (1.0 + geom.n * dphi)


@dataclass
class Trajectory:
    which: str
    scheme: str
    times: list = field(default_factory=list)
    volume: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    q_norm: list = field(default_factory=list)
    q_total: list = field(default_factory=list)
    pairings: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    status: str = "ok"
    diagnostic: str = ""

    @property
    def final(self) -> SmoothConformalState:
        return self.snapshots[-1]

    def as_rows(self) -> list[dict]:
        rows = []
        for i, t in enumerate(self.times):
            row = {"t": t, "volume": self.volume[i], "energy": self.energy[i],
                   "q_norm": self.q_norm[i], "q_total": self.q_total[i]}
            row.update({f"pairing_{j}": v for j, v in enumerate(self.pairings[i])})
            rows.append(row)
        return rows


def integrate_deterministic(geom: TorusGeometry, which: str, state0: SmoothConformalState,
                            f: PrescribingFunction, rho: float = 1.0, dt: float = 1e-3, T: float = 1.0,
                            scheme: str = "imex", cadence: int = 1, test_functions=()) -> Trajectory:
    """Integrate the deterministic flow in cell-mass coordinates.

    Schemes: ``imex`` (linearly implicit Euler), ``rk4`` and ``euler`` (explicit,
    subject to dt * Lambda_max stability limits).
    """
    if which not in FLOWS:
        raise ValueError(f"unknown flow {which!r}")
    f.require(which)
    if scheme not in ("imex", "rk4", "euler"):
        raise ValueError(f"unknown scheme {scheme!r}")
    tests = [_grid_values(geom, h) for h in test_functions]
    traj = Trajectory(which, scheme)
    ename = flow_energy(which)

    def record(t, m):
        st = SmoothConformalState.from_masses(geom, m)
        q = st.q_function(rho * geom.q_ref_const if which == "LQF" else None)
        traj.times.append(t)
        traj.volume.append(float(m.sum()))
        traj.energy.append(energy(geom, ename, st, f, rho))
        traj.q_norm.append(float(np.sqrt(np.sum(m * q ** 2))))
        traj.q_total.append(q_pairing(geom, st, 1.0))
        traj.pairings.append([float(np.sum(m * h)) for h in tests])
        traj.snapshots.append(st)

    def rhs(m):
        return mass_rhs(geom, which, m, f, rho)

    m = state0.masses.copy()
    steps = int(round(T / dt))
    record(0.0, m)
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        for i in range(1, steps + 1):
            try:
                if scheme == "imex":
                    m = imex_step(geom, which, m, f, rho, dt)
                elif scheme == "euler":
                    m = m + dt * rhs(m)
                else:
                    k1 = rhs(m)
                    k2 = rhs(m + 0.5 * dt * k1)
                    k3 = rhs(m + 0.5 * dt * k2)
                    k4 = rhs(m + dt * k3)
                    m = m + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                if not np.all(np.isfinite(m)) or np.any(m <= 0):
                    raise FloatingPointError("non-positive or non-finite cell mass")
            except (FloatingPointError, RuntimeError) as exc:
                traj.status = "aborted"
                traj.diagnostic = f"step {i} (t={i * dt:.6g}): {exc}"
                break
            if i % cadence == 0 or i == steps:
                record(i * dt, m)
    return traj
