"""Grounded co-polyharmonic Gaussian fields and their mollified approximations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, special

from .spectral import FieldCoeffs, TorusGeometry, pairing_E


@dataclass
class CgfSample:
    """One (or a batch of) grounded CGF draws at truncation ``trunc``."""

    field: FieldCoeffs
    seed_path: tuple = ()
    trunc: int = 0

    def grid(self) -> np.ndarray:
        return self.field.grid()

    @property
    def geom(self) -> TorusGeometry:
        return self.field.geom


def white_coeffs(geom: TorusGeometry, rng: np.random.Generator, size: tuple = ()) -> np.ndarray:
    """Hermitian complex coefficients with E|c_k|^2 = 1 and zero mean mode."""
    shape = tuple(size) + geom.coeff_shape
    w = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)
    flip = (Ellipsis,) + (slice(None, None, -1),) * geom.n
    c = (w + np.conj(w[flip])) / math.sqrt(2.0)
    c[(Ellipsis,) + geom.zero_index] = 0.0
    return c


def sample_cgf(geom: TorusGeometry, rng: np.random.Generator, size: int | tuple = (),
               seed_path: tuple = ()) -> CgfSample:
    """Draw grounded CGF(s): independent modes with variance 1/(a_n Lambda_k)."""
    size = (size,) if isinstance(size, int) else tuple(size)
    c = white_coeffs(geom, rng, size) * np.sqrt(geom.green_eig)
    return CgfSample(FieldCoeffs(c, geom), tuple(seed_path), geom.N)


def pair_with_E(geom: TorusGeometry, h: FieldCoeffs, psi: CgfSample):
    return pairing_E(geom, h, psi.field)


def real_mode_coeffs(geom: TorusGeometry, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine/sine coefficients sqrt(2) Re c_k and -sqrt(2) Im c_k in the real orthonormal basis."""
    return math.sqrt(2.0) * c.real, -math.sqrt(2.0) * c.imag


def hat_profile(r):
    return np.clip(1.0 - np.asarray(r, dtype=float), 0.0, None)


@dataclass(frozen=True)
class MollifierFamily:
    """Radial kernels q^j(x, y) = eta(j d(x, y)) / N^j on the torus; eta supported in [0, 1]."""

    j: float
    eta: Callable = field(default=hat_profile)

    @property
    def radius(self) -> float:
        return 1.0 / self.j

    def check_resolved(self, geom: TorusGeometry) -> None:
        if self.radius <= geom.L / geom.G:
            raise ValueError(
                f"mollifier support {self.radius:.4g} is below the grid resolution {geom.L / geom.G:.4g}")

    def grid_kernel(self, geom: TorusGeometry) -> np.ndarray:
        """q^j(x, 0) on the grid, normalized so its quadrature is exactly 1."""
        self.check_resolved(geom)
        x = geom.grid_coords()
        d = np.minimum(x, geom.L - x)
        r = np.sqrt(np.sum(d ** 2, axis=0))
        k = self.eta(self.j * r)
        return k / geom.quadrature(k)

    def grid_multipliers(self, geom: TorusGeometry) -> np.ndarray:
        """Discrete Fourier multipliers of grid convolution with q^j, on the truncation box."""
        k = self.grid_kernel(geom)
        # c_k of q is sqrt(vol) * qhat_k; convolution multiplies coefficients by qhat_k * vol / sqrt(vol)
        return (geom.from_grid(k) * math.sqrt(geom.vol)).real

    def multipliers(self, geom: TorusGeometry) -> np.ndarray:
        """Continuum Fourier multipliers (exact mollification of trig polynomials)."""
        kap = np.sqrt(geom.lam)
        out = np.empty_like(kap)
        for val in np.unique(kap):
            out[kap == val] = _radial_transform(self.eta, geom.n, float(val), float(self.j))
        return out


def _radial_transform(eta, n: int, kappa: float, j: float) -> float:
    nu = n / 2 - 1

    def num(r):
        if kappa == 0:
            return eta(j * r) * r ** (n - 1)
        return eta(j * r) * special.jv(nu, kappa * r) * (kappa * r) ** (-nu) * r ** (n - 1)

    top = integrate.quad(num, 0.0, 1.0 / j, limit=200, epsabs=1e-15, epsrel=1e-13)[0]
    bot = integrate.quad(lambda r: eta(j * r) * r ** (n - 1), 0.0, 1.0 / j,
                         limit=200, epsabs=1e-15, epsrel=1e-13)[0]
    # J_nu(z) z^-nu -> 2^-nu / Gamma(nu + 1) at z = 0
    return top / (bot * 2.0 ** (-nu) / special.gamma(nu + 1)) if kappa else 1.0


def mollified_field(geom: TorusGeometry, fam: MollifierFamily, psi: CgfSample | FieldCoeffs,
                    method: str = "grid") -> np.ndarray:
    """psi^j = q^j * psi on the grid.

    ``method="grid"`` convolves by quadrature on the grid; ``"exact"`` applies the
    continuum multipliers, which is exact for truncated (trigonometric) fields.
    """
    f = psi.field if isinstance(psi, CgfSample) else psi
    fam.check_resolved(geom)
    mult = fam.grid_multipliers(geom) if method == "grid" else fam.multipliers(geom)
    return geom.to_grid(f.coeffs * mult)


def mollified_kernel_diag(geom: TorusGeometry, fam: MollifierFamily, method: str = "grid") -> np.ndarray:
    """k^j(x, x) on the grid (constant by translation invariance)."""
    fam.check_resolved(geom)
    mult = fam.grid_multipliers(geom) if method == "grid" else fam.multipliers(geom)
    val = float(np.sum(mult ** 2 * geom.green_eig) / geom.vol)
    return np.full(geom.grid_shape, val)


def mollified_kernel(geom: TorusGeometry, fam: MollifierFamily, r: np.ndarray) -> np.ndarray:
    """Continuum mollified kernel k^j(x, x + r) of the truncated field."""
    mult = fam.multipliers(geom)
    w = (mult ** 2 * geom.green_eig).reshape(-1)
    kv = geom.kvec.reshape(geom.n, -1).T
    phase = (2 * math.pi / geom.L) * (np.asarray(r, dtype=float) @ kv.T)
    return np.cos(phase) @ w / geom.vol
