"""Cylinder functionals, generators, integration by parts and the symmetrizing measures.

Points of the ungrounded field space are pairs (psi, c) with psi a grounded CGF
and c a constant. The measure they carry is omega = exp(gamma c) M(psi). Inside
the samplers c is replaced by the log total mass u = log omega(1), so a window
omega(1) in (eps, 1/eps) becomes the box |u| < log(1/eps) and dc = du / gamma.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .chaos import check_gamma, gmc_masses
from .curvature import PrescribingFunction
from .fields import sample_cgf, white_coeffs
from .spectral import FieldCoeffs, TorusGeometry, pairing_E
from .volume import compare_laws

MIN_ESS = 100
TARGETS = ("grounded", "ungrounded", "NQF", "LQF")


def q_round_total(n: int) -> float:
    """Total Q-curvature of the round sphere, (4 pi)^(n/2) (n/2 - 1)!."""
    return (4 * math.pi) ** (n // 2) * math.factorial(n // 2 - 1)


def gamma_from_sigma(n: int, a_n: float, sigma: float) -> float:
    return n * math.sqrt(a_n * sigma ** 2 / 2)


def polyakov_liouville_rho(n: int, a_n: float, sigma: float) -> float:
    return 1 + a_n * n * sigma ** 2 / 4


@dataclass
class ModelParams:
    geom: TorusGeometry
    sigma: float
    f: PrescribingFunction
    rho: float = 1.0

    @property
    def n(self) -> int:
        return self.geom.n

    @property
    def gamma(self) -> float:
        return gamma_from_sigma(self.n, self.geom.a_n, self.sigma)

    @property
    def beta_f(self) -> float:
        """Coefficient 2 / (n sigma^2) of omega(f) in the LQF density."""
        return 2 / (self.n * self.sigma ** 2)

    @property
    def kappa_nqf(self) -> float:
        """Exponent of M(psi)(f) in the NQF density."""
        return 2 * self.geom.q_ref_total / (self.n * self.sigma ** 2)

    @property
    def lam_lqf(self) -> float:
        """Exponent of M(psi)(1) (and of exp(-u)) in the LQF density."""
        return 2 * self.rho * self.geom.q_ref_total / (self.n * self.sigma ** 2)

    def check_normalizable(self, target: str) -> None:
        """Arithmetic (A2) / (A2') moment conditions."""
        qr = q_round_total(self.n)
        if target == "NQF":
            self.f.require("NQF")
            ok = self.geom.q_ref_total < qr
        elif target == "LQF":
            self.f.require("LQF")
            ok = self.geom.q_ref_total < qr / self.rho
        else:
            return
        if not ok:
            raise ValueError("marginal not normalizable (A2/A2′ violated)")


# ------------------------------------------------------------- q library
class QFunction:
    """Scalar function of k + 1 variables with exact first and second partials."""

    dim: int

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def log_bump(x0: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(1 - s^2)^3 with s = log(x0) / log(1/eps); value and two x0-derivatives.

    C^2 on (0, inf), supported on (eps, 1/eps).
    """
    width = math.log(1 / eps)
    x0 = np.asarray(x0, dtype=float)
    pos = x0 > 0
    s = np.where(pos, np.log(np.where(pos, x0, 1.0)) / width, 2.0)
    inside = np.abs(s) < 1
    t = np.where(inside, 1 - s ** 2, 0.0)
    b = t ** 3
    db = -6 * s * t ** 2
    d2b = -6 * t ** 2 + 24 * s ** 2 * t
    xs = np.where(pos, x0, 1.0)
    d1 = np.where(inside, db / (xs * width), 0.0)
    d2 = np.where(inside, (d2b / width - db) / (xs ** 2 * width), 0.0)
    return b, d1, d2


@dataclass
class WindowedPolynomial(QFunction):
    """q(x) = sum_t coef_t prod_i x_i^e_ti, times the log bump in x_0 when ``eps`` is set."""

    terms: list
    dim: int
    eps: float | None = None

    def _poly(self, x):
        val = np.zeros(x.shape[:-1])
        grad = np.zeros(x.shape)
        hess = np.zeros(x.shape + (self.dim,))
        for coef, exps in self.terms:
            exps = np.asarray(exps)
            pw = [x[..., i] ** exps[i] for i in range(self.dim)]
            val = val + coef * np.prod(pw, axis=0)
            for i in range(self.dim):
                if exps[i] == 0:
                    continue
                e = exps.copy()
                e[i] -= 1
                gi = coef * exps[i] * np.prod([x[..., a] ** e[a] for a in range(self.dim)], axis=0)
                grad[..., i] += gi
                for j in range(self.dim):
                    if e[j] == 0:
                        continue
                    e2 = e.copy()
                    e2[j] -= 1
                    hess[..., i, j] += coef * exps[i] * e[j] * np.prod(
                        [x[..., a] ** e2[a] for a in range(self.dim)], axis=0)
        return val, grad, hess

    def _all(self, x):
        x = np.asarray(x, dtype=float)
        p, dp, d2p = self._poly(x)
        if self.eps is None:
            return p, dp, d2p
        b, b1, b2 = log_bump(x[..., 0], self.eps)
        val = p * b
        grad = dp * b[..., None]
        grad[..., 0] += p * b1
        hess = d2p * b[..., None, None]
        hess[..., 0, :] += dp * b1[..., None]
        hess[..., :, 0] += dp * b1[..., None]
        hess[..., 0, 0] += p * b2
        return val, grad, hess

    def value(self, x):
        return self._all(x)[0]

    def grad(self, x):
        return self._all(x)[1]

    def hess(self, x):
        return self._all(x)[2]


@dataclass
class ProductQ(QFunction):
    """q1(x[idx1]) * q2(x[idx2]) on a combined coordinate vector."""

    q1: QFunction
    idx1: Sequence[int]
    q2: QFunction
    idx2: Sequence[int]
    dim: int

    def _parts(self, x):
        x = np.asarray(x, dtype=float)
        out = []
        for q, idx in ((self.q1, self.idx1), (self.q2, self.idx2)):
            sub = x[..., list(idx)]
            v = q.value(sub)
            g = np.zeros(x.shape)
            g[..., list(idx)] = q.grad(sub)
            h = np.zeros(x.shape + (self.dim,))
            h[..., np.ix_(list(idx), list(idx))[0], np.ix_(list(idx), list(idx))[1]] = q.hess(sub)
            out.append((v, g, h))
        return out

    def value(self, x):
        (v1, _, _), (v2, _, _) = self._parts(x)
        return v1 * v2

    def grad(self, x):
        (v1, g1, _), (v2, g2, _) = self._parts(x)
        return g1 * v2[..., None] + g2 * v1[..., None]

    def hess(self, x):
        (v1, g1, h1), (v2, g2, h2) = self._parts(x)
        return (h1 * v2[..., None, None] + h2 * v1[..., None, None]
                + g1[..., :, None] * g2[..., None, :] + g2[..., :, None] * g1[..., None, :])


@dataclass
class CylinderFunctional:
    """G(omega) = q(omega(h_0), ..., omega(h_k)) with h_0 = 1."""

    h_list: list
    q: QFunction
    geom: TorusGeometry
    window: float | None = None

    def __post_init__(self):
        grids = []
        for h in self.h_list:
            g = h.grid() if isinstance(h, FieldCoeffs) else np.broadcast_to(np.asarray(h, float), self.geom.grid_shape)
            grids.append(np.array(g, dtype=float))
        if not np.allclose(grids[0], 1.0, rtol=0, atol=1e-12):
            raise ValueError("the first test function must be the constant 1")
        if self.q.dim != len(grids):
            raise ValueError("q dimension does not match the number of test functions")
        self.h_grids = np.stack(grids)
        self.h_coeffs = [h if isinstance(h, FieldCoeffs) else FieldCoeffs.from_grid(self.geom, g)
                         for h, g in zip(self.h_list, grids)]

    @property
    def k(self) -> int:
        return len(self.h_list) - 1

    def coords(self, masses: np.ndarray) -> np.ndarray:
        """x_i = omega(h_i), shape (..., k + 1)."""
        m = masses.reshape(masses.shape[:-self.geom.n] + (-1,))
        return m @ self.h_grids.reshape(len(self.h_list), -1).T

    def __call__(self, masses: np.ndarray) -> np.ndarray:
        return self.q.value(self.coords(masses))

    def __mul__(self, other: "CylinderFunctional") -> "CylinderFunctional":
        d1, d2 = len(self.h_list), len(other.h_list)
        dim = d1 + d2 - 1
        idx2 = [0] + list(range(d1, dim))
        q = ProductQ(self.q, list(range(d1)), other.q, idx2, dim)
        return CylinderFunctional(self.h_list + other.h_list[1:], q, self.geom, self.window)


def random_test_function(geom: TorusGeometry, rng: np.random.Generator, max_mode: int = 2,
                         grounded: bool = False, scale: float = 0.5) -> FieldCoeffs:
    """Random real trigonometric polynomial in the modes |k|_inf <= max_mode, sup norm <= ~1."""
    h = FieldCoeffs.zeros(geom)
    box = range(-max_mode, max_mode + 1)
    modes = [k for k in np.ndindex(*(len(box),) * geom.n)]
    for idx in modes:
        k = tuple(box[i] for i in idx)
        if all(v == 0 for v in k) or tuple(-v for v in k) < k:
            continue
        for kind in ("cos", "sin"):
            h = h + FieldCoeffs.trig_mode(geom, k, kind, scale * rng.standard_normal() / len(modes))
    if not grounded:
        h = h + float(scale * rng.uniform(-1, 1))
    return h


def random_cylinder(geom: TorusGeometry, rng: np.random.Generator, eps: float, n_tests: int = 2,
                    degree: int = 2, max_mode: int = 2, scale: float = 1.0) -> CylinderFunctional:
    """Windowed polynomial functional of omega(1) and ``n_tests`` random low-mode pairings.

    Monomials of degree d are divided by scale^d so they are O(1) when omega(1) ~ scale.
    """
    dim = n_tests + 1
    terms = [(float(rng.standard_normal()), (0,) * dim)]
    for _ in range(3):
        exps = [0] * dim
        for _ in range(int(rng.integers(1, degree + 1))):
            exps[int(rng.integers(dim))] += 1
        terms.append((float(rng.standard_normal()) / scale ** sum(exps), tuple(exps)))
    hs = [FieldCoeffs.constant(geom, 1.0)] + [random_test_function(geom, rng, max_mode) for _ in range(n_tests)]
    return CylinderFunctional(hs, WindowedPolynomial(terms, dim, eps), geom, eps)


# --------------------------------------------------------- sample batches
@dataclass
class MeasureSamples:
    """A batch of points (psi, u) with grounded GMC masses and log importance weights."""

    geom: TorusGeometry
    psi: FieldCoeffs
    u: np.ndarray
    log_w: np.ndarray
    gamma: float
    base_masses: np.ndarray

    @property
    def m1(self) -> np.ndarray:
        return self.base_masses.sum(axis=tuple(range(-self.geom.n, 0)))

    @property
    def masses(self) -> np.ndarray:
        """omega = exp(u) M(psi) / M(psi)(1)."""
        scale = np.exp(self.u) / self.m1
        return self.base_masses * scale.reshape(scale.shape + (1,) * self.geom.n)

    @property
    def c(self) -> np.ndarray:
        return (self.u - np.log(self.m1)) / self.gamma

    def integrate(self, h: np.ndarray, masses: np.ndarray | None = None) -> np.ndarray:
        m = self.masses if masses is None else masses
        return np.sum(m * h, axis=tuple(range(-self.geom.n, 0)))


def weighted_stats(values: np.ndarray, log_w: np.ndarray) -> tuple[float, float, float]:
    """Self-normalized mean, its delta-method SE, and the effective sample size."""
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    mean = float(np.sum(w * values))
    se = float(np.sqrt(np.sum(w ** 2 * (values - mean) ** 2)))
    ess = float(1.0 / np.sum(w ** 2))
    return mean, se, ess


def _truncated_exp_family(lam: float, b: np.ndarray, width: float, rng: np.random.Generator | None):
    """log of int_{-width}^{width} exp(-lam u - b e^u) du and (optionally) exact draws of u."""
    b = np.asarray(b, dtype=float)
    alpha = -lam
    lo, hi = math.exp(-width), math.exp(width)
    if alpha > 0 and np.all(b > 0):
        # V = e^u is a Gamma(alpha, rate b) truncated to (lo, hi)
        p_lo = special.gammainc(alpha, b * lo)
        p_hi = special.gammainc(alpha, b * hi)
        q_lo = special.gammaincc(alpha, b * lo)
        q_hi = special.gammaincc(alpha, b * hi)
        use_p = p_hi < 0.5
        mass = np.where(use_p, p_hi - p_lo, q_lo - q_hi)
        log_z = special.gammaln(alpha) - alpha * np.log(b) + np.log(mass)
        if rng is None:
            return log_z, None
        r = rng.uniform(size=b.shape)
        v_p = special.gammaincinv(alpha, p_lo + r * (p_hi - p_lo)) / b
        v_q = special.gammainccinv(alpha, q_lo - r * (q_lo - q_hi)) / b
        v = np.clip(np.where(use_p, v_p, v_q), lo, hi)
        return log_z, np.log(v)
    # general case: tabulated density on a fine u grid
    grid = np.linspace(-width, width, 4001)
    logd = -lam * grid[None, :] - b.reshape(-1, 1) * np.exp(grid)[None, :]
    top = logd.max(axis=1, keepdims=True)
    dens = np.exp(logd - top)
    cdf = np.concatenate([np.zeros((dens.shape[0], 1)),
                          np.cumsum(0.5 * (dens[:, 1:] + dens[:, :-1]) * np.diff(grid), axis=1)], axis=1)
    log_z = (np.log(cdf[:, -1]) + top[:, 0]).reshape(b.shape)
    if rng is None:
        return log_z, None
    r = rng.uniform(size=dens.shape[0]) * cdf[:, -1]
    u = np.array([np.interp(ri, ci, grid) for ri, ci in zip(r, cdf)])
    return log_z, u.reshape(b.shape)


@dataclass
class WindowedMeasureSampler:
    """Importance sampler and pCN-within-Gibbs chain for the windowed symmetrizing measures.

    ``target`` is one of: ``grounded`` (plain CGF, c = 0), ``ungrounded``
    (CGF times Lebesgue dc on the window), ``NQF`` or ``LQF``.
    """

    target: str
    params: ModelParams
    eps: float
    pcn_beta: float = 0.3
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")
        if not 0 < self.eps < 1:
            raise ValueError("window parameter must lie in (0, 1)")
        check_gamma(self.params.n, self.params.gamma)
        self.params.check_normalizable(self.target)

    @property
    def width(self) -> float:
        return math.log(1 / self.eps)

    @property
    def geom(self) -> TorusGeometry:
        return self.params.geom

    def _base(self, coeffs):
        psi = FieldCoeffs(coeffs, self.geom)
        return psi, gmc_masses(self.geom, psi.grid(), self.params.gamma)

    def _lqf_b(self, base):
        mf = np.sum(base * self.params.f.values, axis=tuple(range(-self.geom.n, 0)))
        m1 = base.sum(axis=tuple(range(-self.geom.n, 0)))
        return self.params.beta_f * np.abs(mf) / m1, m1

    def log_marginal(self, base: np.ndarray) -> np.ndarray:
        """log of the density of psi (against mu_ref) with u integrated over the window."""
        ax = tuple(range(-self.geom.n, 0))
        p = self.params
        if self.target == "grounded":
            return np.zeros(base.shape[:-self.geom.n])
        if self.target == "ungrounded":
            return np.full(base.shape[:-self.geom.n], math.log(2 * self.width / p.gamma))
        if self.target == "NQF":
            mf = np.sum(base * p.f.values, axis=ax)
            return p.kappa_nqf * np.log(mf) + math.log(2 * self.width / p.gamma)
        b, m1 = self._lqf_b(base)
        log_z, _ = _truncated_exp_family(p.lam_lqf, b, self.width, None)
        return p.lam_lqf * np.log(m1) + log_z - math.log(p.gamma)

    def log_joint(self, base: np.ndarray, u: np.ndarray) -> np.ndarray:
        """log density of (psi, u) against mu_ref(dpsi) du (zero outside the window)."""
        p = self.params
        if self.target in ("grounded", "ungrounded"):
            out = np.zeros(np.shape(u))
        elif self.target == "NQF":
            mf = np.sum(base * p.f.values, axis=tuple(range(-self.geom.n, 0)))
            out = p.kappa_nqf * np.log(mf)
        else:
            b, m1 = self._lqf_b(base)
            out = p.lam_lqf * (np.log(m1) - u) - b * np.exp(u)
        return np.where(np.abs(u) < self.width, out, -np.inf)

    def draw_u(self, base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Exact draw of u given psi."""
        shape = base.shape[:-self.geom.n]
        if self.target == "grounded":
            return np.log(base.sum(axis=tuple(range(-self.geom.n, 0))))
        if self.target in ("ungrounded", "NQF"):
            return rng.uniform(-self.width, self.width, size=shape)
        b, _ = self._lqf_b(base)
        return _truncated_exp_family(self.params.lam_lqf, b, self.width, rng)[1]

    def draw(self, size: int, rng: np.random.Generator) -> MeasureSamples:
        """Importance-weighted batch: psi ~ mu_ref, u | psi exact, weight = psi-marginal density."""
        psi = sample_cgf(self.geom, rng, size)
        base = gmc_masses(self.geom, psi.grid(), self.params.gamma)
        u = self.draw_u(base, rng)
        return MeasureSamples(self.geom, psi.field, u, self.log_marginal(base), self.params.gamma, base)

    def window_mass(self, reps: int, rng: np.random.Generator, chunk: int = 2000) -> tuple[float, float]:
        """nu(window) = E_mu[exp(log_marginal)] with its standard error."""
        vals = []
        for start in range(0, reps, chunk):
            psi = sample_cgf(self.geom, rng, min(chunk, reps - start))
            vals.append(np.exp(self.log_marginal(gmc_masses(self.geom, psi.grid(), self.params.gamma))))
        v = np.concatenate(vals)
        return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))

    def run_chains(self, n_chains: int, chain_len: int, rng: np.random.Generator,
                   trace: Callable | None = None) -> tuple[MeasureSamples, dict]:
        """pCN-within-Gibbs, vectorized over independent chains.

        psi moves by the prior-reversible pCN proposal with Metropolis correction
        at fixed u; u is then redrawn from its exact conditional.
        """
        g = self.geom
        beta = self.pcn_beta
        psi = white_coeffs(g, rng, (n_chains,)) * np.sqrt(g.green_eig)
        _, base = self._base(psi)
        u = self.draw_u(base, rng)
        logp = self.log_joint(base, u)
        accepted = 0
        traces = []
        for _ in range(chain_len):
            prop = math.sqrt(1 - beta ** 2) * psi + beta * white_coeffs(g, rng, (n_chains,)) * np.sqrt(g.green_eig)
            _, base_p = self._base(prop)
            logp_p = self.log_joint(base_p, u)
            acc = np.log(rng.uniform(size=n_chains)) < logp_p - logp
            psi = np.where(acc.reshape((-1,) + (1,) * g.n), prop, psi)
            base = np.where(acc.reshape((-1,) + (1,) * g.n), base_p, base)
            accepted += int(acc.sum())
            u = self.draw_u(base, rng)
            logp = self.log_joint(base, u)
            if trace is not None:
                traces.append(trace(psi, u))
        diag = {"acceptance": accepted / (n_chains * chain_len), "chains": n_chains, "length": chain_len}
        if traces:
            diag["iat"] = integrated_autocorr_time(np.array(traces))
        self.diagnostics.update(diag)
        samples = MeasureSamples(g, FieldCoeffs(psi, g), u, np.zeros(n_chains), self.params.gamma, base)
        return samples, diag


def integrated_autocorr_time(x: np.ndarray, c: float = 5.0) -> float:
    """Sokal-windowed integrated autocorrelation time; ``x`` has shape (steps, chains)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    steps = x.shape[0]
    xc = x - x.mean(axis=0)
    f = np.fft.rfft(xc, n=2 * steps, axis=0)
    acf = np.fft.irfft(f * np.conj(f), axis=0)[:steps].mean(axis=1)
    if acf[0] <= 0:
        return 1.0
    acf /= acf[0]
    tau = 2 * np.cumsum(acf) - 1
    for m in range(1, steps):
        if m >= c * tau[m]:
            return float(tau[m])
    return float(tau[-1])


def pcn_step(geom: TorusGeometry, psi: np.ndarray, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Prior-preserving pCN move with unit density (always accepted)."""
    noise = white_coeffs(geom, rng, psi.shape[:-geom.n]) * np.sqrt(geom.green_eig)
    return math.sqrt(1 - beta ** 2) * psi + beta * noise


def sample_symmetrizing(geom: TorusGeometry, target: str, window_eps: float, chain_len: int,
                        rng: np.random.Generator, params: ModelParams, n_chains: int = 64,
                        pcn_beta: float = 0.3) -> tuple[MeasureSamples, dict]:
    """Final states of independent pCN-within-Gibbs chains plus diagnostics."""
    if target not in ("NQF", "LQF"):
        raise ValueError("target must be NQF or LQF")
    sampler = WindowedMeasureSampler(target, params, window_eps, pcn_beta)
    samples, diag = sampler.run_chains(n_chains, chain_len, rng, trace=lambda psi, u: u)
    diag["window_mass"] = sampler.window_mass(2000, rng)
    return samples, diag


# ------------------------------------------------- derivatives, generators
def frechet_derivative(G: CylinderFunctional, masses: np.ndarray, gamma: float, h: np.ndarray) -> np.ndarray:
    """D_h G = gamma sum_i d_i q(x) omega(h_i h)."""
    geom = G.geom
    x = G.coords(masses)
    dq = G.q.grad(x)
    m = masses.reshape(masses.shape[:-geom.n] + (-1,))
    mh = m @ (G.h_grids * h).reshape(len(G.h_list), -1).T
    return gamma * np.sum(dq * mh, axis=-1)


def _pair_integrals(F: CylinderFunctional, G: CylinderFunctional, masses: np.ndarray) -> np.ndarray:
    """omega(f_j g_i), shape (..., len(F), len(G))."""
    n = F.geom.n
    m = masses.reshape(masses.shape[:-n] + (-1,))
    fg = (F.h_grids[:, None] * G.h_grids[None, :]).reshape(len(F.h_list) * len(G.h_list), -1)
    return (m @ fg.T).reshape(m.shape[:-1] + (len(F.h_list), len(G.h_list)))


def carre_du_champ(F: CylinderFunctional, G: CylinderFunctional, masses: np.ndarray, params: ModelParams) -> np.ndarray:
    """n^2 sigma^2 sum_ij d_j p d_i q omega(f_j g_i)."""
    dp = F.q.grad(F.coords(masses))
    dq = G.q.grad(G.coords(masses))
    pairs = _pair_integrals(F, G, masses)
    return params.n ** 2 * params.sigma ** 2 * np.einsum("...j,...i,...ji->...", dp, dq, pairs)


def apply_generator(which: str, G: CylinderFunctional, samples: MeasureSamples, params: ModelParams) -> np.ndarray:
    """Literal evaluation of the NQF / LQF generator on a batch of (psi, c) points."""
    geom = G.geom
    n, s2, gam = params.n, params.sigma ** 2, params.gamma
    masses = samples.masses
    x = G.coords(masses)
    dq = G.q.grad(x)
    d2q = G.q.hess(x)
    second = 0.5 * n ** 2 * s2 * np.einsum("...ij,...ij->...", d2q, _pair_integrals(G, G, masses))
    pair_e = np.stack([pairing_E(geom, h, samples.psi) for h in G.h_coeffs], axis=-1)
    ref = np.array([geom.quadrature(h) for h in G.h_grids])
    m = masses.reshape(masses.shape[:-geom.n] + (-1,))
    fg = m @ (G.h_grids * params.f.values).reshape(len(G.h_list), -1).T
    noise_term = -(n ** 2 * s2 / (2 * gam)) * np.sum(dq * pair_e, axis=-1)
    if which == "NQF":
        wf = m @ params.f.values.ravel()
        first = np.sum(dq * n * geom.q_ref_total * fg / wf[..., None], axis=-1)
        background = -n * geom.q_ref_const * np.sum(dq * ref, axis=-1)
    elif which == "LQF":
        first = np.sum(dq * n * fg, axis=-1)
        background = -n * params.rho * geom.q_ref_const * np.sum(dq * ref, axis=-1)
    else:
        raise ValueError(f"unknown flow {which!r}")
    return first + second + background + noise_term


# ------------------------------------------------------------- IBP checks
@dataclass
class CheckResult:
    """Monte Carlo estimates of two sides of an identity and a paired z-score."""

    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    z: float
    ess: float
    n: int
    exact_zero: bool = False

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _paired(lhs_vals, rhs_vals, log_w) -> CheckResult:
    lhs, lhs_se, ess = weighted_stats(lhs_vals, log_w)
    rhs, rhs_se, _ = weighted_stats(rhs_vals, log_w)
    diff, diff_se, _ = weighted_stats(lhs_vals - rhs_vals, log_w)
    if ess < MIN_ESS:
        raise ValueError(f"effective sample size {ess:.1f} below {MIN_ESS}; refusing to report")
    exact = diff_se == 0 and diff == 0
    z = 0.0 if exact else diff / diff_se
    return CheckResult(lhs, lhs_se, rhs, rhs_se, float(z), ess, len(lhs_vals), exact)


def ibp_terms(target: str, G: CylinderFunctional, h: FieldCoeffs, samples: MeasureSamples, params: ModelParams,
              r: tuple[Callable, Callable] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample integrands (pairing side, derivative side) of the IBP identity for ``target``."""
    geom = G.geom
    gam, s2, n = params.gamma, params.sigma ** 2, params.n
    hg = h.grid()
    h_ref = geom.quadrature(hg)
    masses = samples.base_masses if target == "grounded" else samples.masses
    gval = G(masses)
    pair = pairing_E(geom, h, samples.psi)
    dh = frechet_derivative(G, masses, gam, hg)
    if target == "grounded":
        dbar = frechet_derivative(G, masses, gam, np.full(geom.grid_shape, h_ref / geom.vol))
        return gval * pair, dh - dbar
    if target == "ungrounded":
        rf, drf = r if r is not None else (lambda x: np.ones_like(x), lambda x: np.zeros_like(x))
        cvol = samples.c * geom.vol
        return rf(cvol) * gval * pair, drf(cvol) * h_ref * gval + rf(cvol) * dh
    if target == "NQF":
        fh = samples.integrate(params.f.values * hg, masses)
        wf = samples.integrate(params.f.values, masses)
        rhs = (dh + 2 * gam * geom.q_ref_total / (n * s2) * gval * fh / wf
               - 2 * gam * geom.q_ref_const * h_ref / (n * s2) * gval)
        return gval * pair, rhs
    fh = samples.integrate(params.f.values * hg, masses)
    rhs = (dh + 2 * gam / (n * s2) * gval * fh
           - params.rho * geom.q_ref_const * math.sqrt(2 * geom.a_n / s2) * gval * h_ref)
    return gval * pair, rhs


def ibp_check(geom: TorusGeometry, target: str, G: CylinderFunctional, h: FieldCoeffs, reps: int,
              rng: np.random.Generator, params: ModelParams, eps: float | None = None,
              chunk: int = 5000, r=None) -> CheckResult:
    """Estimate both sides of the integration-by-parts identity for ``target``."""
    if target == "LQF" and not h.grounded:
        raise ValueError("LQF integration by parts requires a grounded direction h")
    eps = G.window if eps is None else eps
    sampler = WindowedMeasureSampler(target, params, eps)
    lhs, rhs, logw = [], [], []
    for start in range(0, reps, chunk):
        s = sampler.draw(min(chunk, reps - start), rng)
        a, b = ibp_terms(target, G, h, s, params, r)
        lhs.append(a)
        rhs.append(b)
        logw.append(s.log_w)
    return _paired(np.concatenate(lhs), np.concatenate(rhs), np.concatenate(logw))


@dataclass
class FormCheck:
    form: CheckResult
    symmetry: CheckResult


def form_check(which: str, F: CylinderFunctional, G: CylinderFunctional, reps: int, rng: np.random.Generator,
               params: ModelParams, eps: float | None = None, chunk: int = 5000) -> FormCheck:
    """E[F (-L G)] against the carré-du-champ form, and E[F L G] against E[G L F]."""
    eps = min(F.window, G.window) if eps is None else eps
    sampler = WindowedMeasureSampler(which, params, eps)
    cols = {k: [] for k in ("flg", "form", "glf", "logw")}
    for start in range(0, reps, chunk):
        s = sampler.draw(min(chunk, reps - start), rng)
        m = s.masses
        cols["flg"].append(F(m) * apply_generator(which, G, s, params))
        cols["glf"].append(G(m) * apply_generator(which, F, s, params))
        cols["form"].append(0.5 * carre_du_champ(F, G, m, params))
        cols["logw"].append(s.log_w)
    c = {k: np.concatenate(v) for k, v in cols.items()}
    return FormCheck(_paired(-c["flg"], c["form"], c["logw"]), _paired(c["flg"], c["glf"], c["logw"]))


# ------------------------------------------------------------ stationarity
@dataclass
class StationarityReport:
    pvalues: dict
    statistics: dict
    polyakov_liouville: bool
    rho: float
    passed: bool
    diagnostics: dict = field(default_factory=dict)


def check_stationary_regime(params: ModelParams) -> None:
    geom = params.geom
    if geom.q_ref_const >= 0:
        raise ValueError("stationarity regime requires q_ref_const < 0")
    if not np.allclose(params.f.values, geom.q_ref_const):
        raise ValueError("stationarity regime requires f = Q_ref")
    if params.sigma ** 2 > -2 * geom.q_ref_total:
        raise ValueError("stationarity regime requires sigma^2 <= -2 Q_ref(1)")


def stationarity_check(params: ModelParams, T: float, dt: float, n_samples: int, chain_len: int,
                       rng: np.random.Generator, observables: Sequence[CylinderFunctional] = (),
                       window_eps: float = 1e-4, level: float = 0.01) -> StationarityReport:
    """Compare observables at t = 0 and t = T for LQF started from the windowed symmetrizing law.

    Two independent sets of chain samples are drawn; one is observed directly,
    the other is evolved by the stochastic flow before observation.
    """
    from .stochastic import FlowParams, MeasureState, SdeScheme, run_flow

    check_stationary_regime(params)
    geom = params.geom
    rho_pl = polyakov_liouville_rho(geom.n, geom.a_n, params.sigma)
    start, diag0 = sample_symmetrizing(geom, "LQF", window_eps, chain_len, rng, params, n_samples)
    evolve, diag1 = sample_symmetrizing(geom, "LQF", window_eps, chain_len, rng, params, n_samples)
    init = MeasureState(evolve.masses, geom, 0.0, np.ones(n_samples, dtype=bool))
    flow = FlowParams("LQF", params.f, params.sigma, SdeScheme(dt), params.rho)
    rec = run_flow(geom, "LQF", init, flow, T, max(1, int(round(T / dt))), rng, seed_path=())
    end = rec.final.masses
    alive = np.asarray(rec.final.alive, dtype=bool)
    obs = {"V": (start.masses.sum(axis=tuple(range(-geom.n, 0))), end.sum(axis=tuple(range(-geom.n, 0)))[alive])}
    # normalized first-mode pairing probes the shape of omega, not just its size
    probe = FieldCoeffs.trig_mode(geom, (1,) + (0,) * (geom.n - 1), "cos").grid()
    obs["shape"] = (start.integrate(probe) / obs["V"][0],
                    np.sum(end * probe, axis=tuple(range(-geom.n, 0)))[alive] / obs["V"][1])
    for i, G in enumerate(observables):
        obs[f"G{i}"] = (G(start.masses), G(end)[alive])
    pvals, stats_ = {}, {}
    for name, (a, b) in obs.items():
        res = compare_laws(a, b)
        pvals[name], stats_[name] = res.pvalue, res.statistic
    return StationarityReport(
        pvalues=pvals, statistics=stats_, polyakov_liouville=bool(math.isclose(params.rho, rho_pl, rel_tol=1e-9)),
        rho=params.rho, passed=all(p > level for p in pvals.values()),
        diagnostics={"chains_start": diag0, "chains_evolved": diag1, "floor_fraction": rec.floor_fraction,
                     "killed": int((~alive).sum()), "flags": rec.flags})
