"""Exact reference laws for total-volume processes.

NQF volume: dV = c sqrt(V) dB with c = n sigma, a squared Bessel process of
dimension 0 after the rescaling V = (c^2 / 4) X, dX = 2 sqrt(X) dB.
LQF volume: dV = a (V - b) dt + s sqrt(V) dB, a CIR process with
a = n Q_ref(1) / V_ref, b = rho V_ref, s = n sigma.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

KS_EXACT_MAX = 35


def _check_nonneg(**kw):
    for name, val in kw.items():
        if np.any(np.asarray(val) < 0):
            raise ValueError(f"{name} must be nonnegative")


# ------------------------------------------------------------------ BESQ(0)
def besq0_scale(diffusion_coeff: float) -> float:
    """V = scale * X maps the standard BESQ(0) onto dV = c sqrt(V) dB."""
    return diffusion_coeff ** 2 / 4.0


def besq0_transition(v0, t: float, diffusion_coeff: float, rng: np.random.Generator, size=None) -> np.ndarray:
    """Exact draw of V_t: Poisson mixture of Gamma laws with an atom at zero."""
    _check_nonneg(v0=v0, diffusion_coeff=diffusion_coeff)
    if t <= 0:
        raise ValueError("t must be positive")
    scale = besq0_scale(diffusion_coeff)
    x0 = np.asarray(v0, dtype=float) / scale
    shape = np.shape(x0) if size is None else size
    k = rng.poisson(np.broadcast_to(x0 / (2 * t), shape))
    body = rng.gamma(np.maximum(k, 1), 1.0)
    return np.where(k > 0, 2 * t * body, 0.0) * scale


def besq0_absorption_prob(v0, t: float, diffusion_coeff: float):
    """P(V_t = 0) = exp(-2 v0 / (c^2 t))."""
    _check_nonneg(v0=v0, diffusion_coeff=diffusion_coeff)
    if t <= 0:
        raise ValueError("t must be positive")
    return np.exp(-2.0 * np.asarray(v0, dtype=float) / (diffusion_coeff ** 2 * t))


# --------------------------------------------------------------------- CIR
@dataclass(frozen=True)
class CirSpec:
    """dV = a (V - b) dt + s sqrt(V) dB; mean reverting when a < 0."""

    a: float
    b: float
    s: float

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("volatility coefficient must be positive")

    @classmethod
    def from_flow(cls, n: int, q_ref_const: float, v_ref: float, rho: float, sigma: float) -> "CirSpec":
        return cls(a=n * q_ref_const, b=rho * v_ref, s=n * sigma)

    @property
    def kappa(self) -> float:
        return -self.a

    def feller_exact(self) -> bool:
        """2 kappa theta >= s^2: the boundary zero is never reached."""
        return 2 * self.kappa * self.b >= self.s ** 2


def feller_flag(q_ref_const: float, v_ref: float, rho: float, sigma: float) -> bool:
    """The positivity inequality 2 (-Q_ref)(rho V_ref) >= sigma^2 as stated for the volume SDE."""
    return 2 * (-q_ref_const) * (rho * v_ref) >= sigma ** 2


def cir_transition(spec: CirSpec, v0, t: float, rng: np.random.Generator, size=None) -> np.ndarray:
    """Exact draw via the scaled noncentral chi-squared representation."""
    if t <= 0:
        raise ValueError("t must be positive")
    if spec.kappa <= 0:
        raise ValueError("exact CIR transition needs mean reversion (a < 0)")
    _check_nonneg(v0=v0)
    k, s2 = spec.kappa, spec.s ** 2
    decay = math.exp(-k * t)
    c = s2 * (1 - decay) / (4 * k)
    df = 4 * k * spec.b / s2
    nc = np.asarray(v0, dtype=float) * decay / c
    shape = np.shape(nc) if size is None else size
    nc = np.broadcast_to(nc, shape)
    # numpy rejects a zero noncentrality; use the central law there
    out = np.where(nc > 0, rng.noncentral_chisquare(df, np.maximum(nc, 1e-300), size=shape),
                   rng.chisquare(df, size=shape))
    return c * out


def cir_moments(spec: CirSpec, v0: float, t: float) -> tuple[float, float]:
    """Closed-form mean and variance of V_t."""
    k, th, s2 = spec.kappa, spec.b, spec.s ** 2
    e = math.exp(-k * t)
    mean = th + (v0 - th) * e
    var = v0 * s2 * e * (1 - e) / k + th * s2 * (1 - e) ** 2 / (2 * k)
    return mean, var


def cir_stationary(spec: CirSpec) -> dict:
    """Gamma stationary law: shape 2 kappa b / s^2, rate 2 kappa / s^2."""
    if spec.kappa <= 0:
        raise ValueError("no stationary law without mean reversion")
    shape = 2 * spec.kappa * spec.b / spec.s ** 2
    rate = 2 * spec.kappa / spec.s ** 2
    return {"shape": shape, "rate": rate, "scale": 1.0 / rate, "mean": shape / rate,
            "cdf": stats.gamma(shape, scale=1.0 / rate).cdf}


def cir_paths(spec: CirSpec, v0: float, t: float, steps: int, n_paths: int,
              rng: np.random.Generator) -> np.ndarray:
    """Exact paths on a uniform time grid, shape (n_paths, steps + 1)."""
    dt = t / steps
    out = np.empty((n_paths, steps + 1))
    out[:, 0] = v0
    for i in range(steps):
        out[:, i + 1] = cir_transition(spec, out[:, i], dt, rng)
    return out


# ----------------------------------------------------------- Euler oracles
def euler_volume_paths(v0: float, t: float, dt: float, n_paths: int, rng: np.random.Generator,
                       drift=None, diffusion_coeff: float = 1.0, chunk: int = 20000) -> np.ndarray:
    """Brute-force Euler for dV = drift(V) dt + c sqrt(V) dB, absorbed at zero.

    Returns terminal values; absorbed paths are exactly zero.
    """
    steps = int(round(t / dt))
    out = np.empty(n_paths)
    sq = math.sqrt(dt)
    for start in range(0, n_paths, chunk):
        v = np.full(min(chunk, n_paths - start), float(v0))
        alive = v > 0
        for _ in range(steps):
            inc = diffusion_coeff * np.sqrt(v) * sq * rng.standard_normal(v.shape)
            if drift is not None:
                inc = inc + drift(v) * dt
            v = np.where(alive, v + inc, 0.0)
            alive &= v > 0
            v = np.where(alive, v, 0.0)
        out[start:start + len(v)] = v
    return out


# ------------------------------------------------------------ KS utilities
@dataclass
class KsResult:
    statistic: float
    pvalue: float
    method: str
    n: tuple


def compare_laws(a, b=None, cdf=None, min_samples: int = 200) -> KsResult:
    """One- or two-sample Kolmogorov-Smirnov test.

    Exact p-values are used when every sample has at most 35 points,
    the asymptotic Kolmogorov distribution otherwise.
    """
    a = np.asarray(a, dtype=float).ravel()
    if (b is None) == (cdf is None):
        raise ValueError("pass exactly one of a second sample or a reference cdf")
    sizes = (len(a),) if b is None else (len(a), len(np.ravel(b)))
    if min(sizes) < min_samples:
        raise ValueError(f"insufficient samples: need at least {min_samples} per side, got {sizes}")
    method = "exact" if max(sizes) <= KS_EXACT_MAX else "asymp"
    if b is None:
        res = stats.kstest(a, cdf, method=method)
    else:
        res = stats.ks_2samp(a, np.asarray(b, dtype=float).ravel(), method=method)
    return KsResult(float(res.statistic), float(res.pvalue), method, sizes)
