"""Flat-torus reference geometry and its diagonal spectral operators.

Fields are stored as L2-normalized complex Fourier coefficients on the
truncated frequency box ``|k|_inf <= N``:

    u(x) = sum_k c_k exp(i 2 pi k.x / L) / sqrt(vol)

so that ``||u||_{L2}^2 = sum_k |c_k|^2``. Real fields carry Hermitian
symmetry ``c_{-k} = conj(c_k)``. The coefficient array is centred (index
``k + N`` on each axis) and may carry arbitrary leading batch axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

OPERATORS = ("laplacian", "P", "p", "green")


def a_n_constant(n: int) -> float:
    """Normalizing constant 2 / ((n/2 - 1)! (4 pi)^(n/2))."""
    if n < 2 or n % 2:
        raise ValueError(f"dimension must be even and >= 2, got {n}")
    return 2.0 / (math.factorial(n // 2 - 1) * (4.0 * math.pi) ** (n // 2))


class TorusGeometry:
    """Discretized flat torus (R / L Z)^n with spectral tables.

    Immutable after construction; all tables are read-only arrays.
    """

    def __init__(self, n: int = 2, L: float = 2 * math.pi, G: int = 64, N: int = 8,
                 q_ref_const: float = 0.0):
        if n < 2 or n % 2:
            raise ValueError(f"dimension must be even and >= 2, got {n}")
        if G < 2 or G & (G - 1):
            raise ValueError(f"grid size must be a power of two, got {G}")
        if N < 1 or N > G // 2 - 1:
            raise ValueError(f"truncation N={N} must satisfy 1 <= N <= G/2 - 1 (G={G})")
        if L <= 0:
            raise ValueError("period must be positive")
        self.n = int(n)
        self.L = float(L)
        self.G = int(G)
        self.N = int(N)
        self.q_ref_const = float(q_ref_const)
        self.a_n = a_n_constant(n)
        self.vol = self.L ** n
        self.cell_vol = (self.L / self.G) ** n
        self.M = 2 * self.N + 1
        self.coeff_shape = (self.M,) * n
        self.grid_shape = (self.G,) * n
        self.q_ref_total = self.q_ref_const * self.vol

        k1 = np.arange(-self.N, self.N + 1)
        self.kvec = np.stack(np.meshgrid(*([k1] * n), indexing="ij"))
        self.lam = ((2 * math.pi / self.L) ** 2) * np.sum(self.kvec.astype(float) ** 2, axis=0)
        self.Lam = self.lam ** (n // 2)
        self.p_eig = self.a_n * self.Lam
        zero = (self.N,) * n
        self.zero_index = zero
        green = np.zeros(self.coeff_shape)
        nz = self.p_eig > 0
        green[nz] = 1.0 / self.p_eig[nz]
        self.green_eig = green
        self._tables = {
            "laplacian": -self.lam,
            "P": self.Lam,
            "p": self.p_eig,
            "green": self.green_eig,
        }

        # rfft layout embedding: last axis keeps k >= 0 only
        self._pos = self.kvec[-1] >= 0
        self._neg = ~self._pos
        self._emb_pos = tuple(np.mod(self.kvec[a][self._pos], self.G) for a in range(n))
        self._emb_neg = tuple(np.mod(-self.kvec[a][self._neg], self.G) for a in range(n))
        self._rshape = self.grid_shape[:-1] + (self.G // 2 + 1,)
        self._scale_to_grid = self.G ** n / math.sqrt(self.vol)
        self._scale_from_grid = math.sqrt(self.vol) / self.G ** n

        for arr in (self.kvec, self.lam, self.Lam, self.p_eig, self.green_eig):
            arr.setflags(write=False)

    # ------------------------------------------------------------------ #
    def __repr__(self) -> str:
        return (f"TorusGeometry(n={self.n}, L={self.L:g}, G={self.G}, N={self.N}, "
                f"q_ref_const={self.q_ref_const:g})")

    def with_(self, **kw) -> "TorusGeometry":
        args = dict(n=self.n, L=self.L, G=self.G, N=self.N, q_ref_const=self.q_ref_const)
        args.update(kw)
        return TorusGeometry(**args)

    @property
    def synthetic_background(self) -> bool:
        return self.q_ref_const != 0.0

    def eigen_table(self, which: str) -> np.ndarray:
        try:
            return self._tables[which]
        except KeyError:
            raise ValueError(f"unknown operator {which!r}; expected one of {OPERATORS}") from None

    def grid_coords(self) -> np.ndarray:
        x1 = np.arange(self.G) * (self.L / self.G)
        return np.stack(np.meshgrid(*([x1] * self.n), indexing="ij"))

    def green_variance(self) -> float:
        """Pointwise variance of the truncated field, k_N(x, x)."""
        return float(self.green_eig.sum() / self.vol)

    # ----------------------------- transforms ------------------------- #
    def to_grid(self, coeffs: np.ndarray) -> np.ndarray:
        coeffs = np.asarray(coeffs)
        batch = coeffs.shape[: coeffs.ndim - self.n]
        if coeffs.shape[len(batch):] != self.coeff_shape:
            raise ValueError(f"coefficient shape {coeffs.shape} does not match {self.coeff_shape}")
        spec = np.zeros(batch + self._rshape, dtype=complex)
        sl = (Ellipsis,) + self._emb_pos
        spec[sl] = coeffs[(Ellipsis,) + tuple(np.nonzero(self._pos))]
        axes = tuple(range(-self.n, 0))
        return np.fft.irfftn(spec, s=self.grid_shape, axes=axes) * self._scale_to_grid

    def from_grid(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[values.ndim - self.n:] != self.grid_shape:
            raise ValueError(f"grid values shape {values.shape} does not match {self.grid_shape}")
        axes = tuple(range(-self.n, 0))
        spec = np.fft.rfftn(values, axes=axes)
        batch = values.shape[: values.ndim - self.n]
        out = np.empty(batch + self.coeff_shape, dtype=complex)
        out[(Ellipsis,) + tuple(np.nonzero(self._pos))] = spec[(Ellipsis,) + self._emb_pos]
        out[(Ellipsis,) + tuple(np.nonzero(self._neg))] = np.conj(spec[(Ellipsis,) + self._emb_neg])
        return out * self._scale_from_grid

    def quadrature(self, values: np.ndarray) -> np.ndarray | float:
        values = np.asarray(values)
        if values.shape[values.ndim - self.n:] != self.grid_shape:
            raise ValueError(f"grid values shape {values.shape} does not match {self.grid_shape}")
        out = values.sum(axis=tuple(range(-self.n, 0))) * self.cell_vol
        return float(out) if np.ndim(out) == 0 else out

    def grid_apply(self, values: np.ndarray, which: str) -> np.ndarray:
        """Apply an operator to grid values through the truncated spectrum."""
        c = self.from_grid(values)
        if which == "green":
            c[(Ellipsis,) + self.zero_index] = 0.0
        return self.to_grid(c * self.eigen_table(which))

    def project(self, values: np.ndarray) -> np.ndarray:
        """Orthogonal projection of grid values onto the truncated band."""
        return self.to_grid(self.from_grid(values))


@dataclass
class FieldCoeffs:
    """Real field given by truncated, L2-normalized Fourier coefficients."""

    coeffs: np.ndarray
    geom: TorusGeometry

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        if self.coeffs.shape[self.coeffs.ndim - self.geom.n:] != self.geom.coeff_shape:
            raise ValueError("coefficients outside truncation box")

    # constructors
    @classmethod
    def zeros(cls, geom: TorusGeometry, batch: tuple = ()) -> "FieldCoeffs":
        return cls(np.zeros(batch + geom.coeff_shape, dtype=complex), geom)

    @classmethod
    def constant(cls, geom: TorusGeometry, c: float) -> "FieldCoeffs":
        out = cls.zeros(geom)
        out.coeffs[geom.zero_index] = c * math.sqrt(geom.vol)
        return out

    @classmethod
    def from_grid(cls, geom: TorusGeometry, values: np.ndarray) -> "FieldCoeffs":
        return cls(geom.from_grid(values), geom)

    @classmethod
    def from_function(cls, geom: TorusGeometry, fn: Callable[[np.ndarray], np.ndarray]) -> "FieldCoeffs":
        """Project ``fn(x)`` (x of shape (n, G, ..., G)) onto the truncated band."""
        return cls.from_grid(geom, fn(geom.grid_coords()))

    @classmethod
    def trig_mode(cls, geom: TorusGeometry, k: Iterable[int], kind: str = "cos",
                  amplitude: float = 1.0) -> "FieldCoeffs":
        """amplitude * cos(2 pi k.x / L) (or sin)."""
        k = tuple(int(v) for v in k)
        if len(k) != geom.n or max(abs(v) for v in k) > geom.N:
            raise ValueError(f"mode {k} outside truncation")
        out = cls.zeros(geom)
        idx = tuple(v + geom.N for v in k)
        neg = tuple(-v + geom.N for v in k)
        s = amplitude * math.sqrt(geom.vol) / 2
        if kind == "cos":
            out.coeffs[idx] += s
            out.coeffs[neg] += s
        elif kind == "sin":
            out.coeffs[idx] += -1j * s
            out.coeffs[neg] += 1j * s
        else:
            raise ValueError("kind must be 'cos' or 'sin'")
        return out

    # views
    @property
    def grounded(self) -> bool:
        return bool(np.all(self.coeffs[(Ellipsis,) + self.geom.zero_index] == 0))

    @property
    def mean(self):
        return self.coeffs[(Ellipsis,) + self.geom.zero_index].real / math.sqrt(self.geom.vol)

    def grid(self) -> np.ndarray:
        return self.geom.to_grid(self.coeffs)

    def ground(self) -> "FieldCoeffs":
        c = self.coeffs.copy()
        c[(Ellipsis,) + self.geom.zero_index] = 0.0
        return FieldCoeffs(c, self.geom)

    def __add__(self, other):
        if isinstance(other, FieldCoeffs):
            return FieldCoeffs(self.coeffs + other.coeffs, self.geom)
        return self + FieldCoeffs.constant(self.geom, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-1.0) * other

    def __mul__(self, scalar):
        return FieldCoeffs(self.coeffs * scalar, self.geom)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def apply_operator(geom: TorusGeometry, which: str, u: FieldCoeffs) -> FieldCoeffs:
    """Diagonal spectral action of the Laplacian, P_ref, p_ref or the Green operator."""
    table = geom.eigen_table(which)
    if which == "green" and not u.grounded:
        raise ValueError("Green kernel undefined on constants")
    return FieldCoeffs(u.coeffs * table, geom)


def sobolev_norm(geom: TorusGeometry, u: FieldCoeffs, s: float) -> float:
    """Co-polyharmonic Sobolev norm ||(1 + p)^(s/n) u||_{L2}."""
    w = (1.0 + geom.p_eig) ** (2.0 * s / geom.n)
    return float(np.sqrt(np.sum(w * np.abs(u.coeffs) ** 2)))


def l2_inner(h: FieldCoeffs, u: FieldCoeffs):
    ax = tuple(range(-h.geom.n, 0))
    return np.sum(h.coeffs * np.conj(u.coeffs), axis=ax).real


def pairing_E(geom: TorusGeometry, h: FieldCoeffs, u: FieldCoeffs):
    """Cameron-Martin pairing <h, u>_E = omega_ref(h p_ref u); constants pair to zero."""
    ax = tuple(range(-geom.n, 0))
    out = np.sum(geom.p_eig * h.coeffs * np.conj(u.coeffs), axis=ax).real
    return float(out) if np.ndim(out) == 0 else out


def green_kernel(geom: TorusGeometry, r: np.ndarray, N: int | None = None) -> np.ndarray:
    """Truncated Green kernel k_N(x, y) as a function of the displacement r = x - y.

    ``r`` has shape (..., n). Evaluated by the direct cosine sum, so ``N`` may
    exceed the geometry's own truncation.
    """
    N = geom.N if N is None else int(N)
    r = np.asarray(r, dtype=float)
    k1 = np.arange(-N, N + 1)
    kv = np.stack(np.meshgrid(*([k1] * geom.n), indexing="ij")).reshape(geom.n, -1).T
    kv = kv[np.any(kv != 0, axis=1)]
    lam = (2 * math.pi / geom.L) ** 2 * np.sum(kv.astype(float) ** 2, axis=1)
    w = 1.0 / (geom.a_n * lam ** (geom.n // 2))
    phase = (2 * math.pi / geom.L) * (r @ kv.T)
    return np.cos(phase) @ w / geom.vol


def green_kernel_grid(geom: TorusGeometry) -> np.ndarray:
    """k_N(x, 0) sampled on the quadrature grid."""
    return geom.to_grid(geom.green_eig / math.sqrt(geom.vol))
