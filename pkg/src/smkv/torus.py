"""Grid functions on the torus [0, 2*pi) and the spectral operations on them.

A :class:`Field` keeps its nodal values and lazily computes the complex
Fourier coefficients ``c_k`` of ``f(x) = sum_k c_k exp(i k x)`` for
``k = 0..n/2`` (the negative modes follow by conjugate symmetry).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Union

import numpy as np
from scipy.special import ive

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class TorusGrid:
    n_points: int

    def __post_init__(self):
        if self.n_points < 8 or self.n_points % 2:
            raise ValueError(f"n_points must be an even integer >= 8, got {self.n_points}")

    @property
    def spacing(self) -> float:
        return TWO_PI / self.n_points

    @cached_property
    def nodes(self) -> np.ndarray:
        x = np.arange(self.n_points) * self.spacing
        x.setflags(write=False)
        return x

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Non-negative wavenumbers of the real transform, 0..n/2."""
        k = np.arange(self.n_points // 2 + 1, dtype=float)
        k.setflags(write=False)
        return k

    def field(self, func: Callable[[np.ndarray], np.ndarray]) -> "Field":
        return Field(self, np.broadcast_to(func(self.nodes), (self.n_points,)))

    def constant(self, c: float) -> "Field":
        return Field(self, np.full(self.n_points, float(c)))

    def zeros(self) -> "Field":
        return self.constant(0.0)


class Field:
    """Real function sampled on a :class:`TorusGrid`.

    Instances are treated as immutable: arithmetic returns new fields.
    """

    __slots__ = ("grid", "_values", "_coeffs")

    def __init__(self, grid: TorusGrid, values, coeffs=None):
        values = np.array(values, dtype=float)
        if values.shape != (grid.n_points,):
            raise ValueError(f"expected {grid.n_points} values, got shape {values.shape}")
        values.setflags(write=False)
        self.grid = grid
        self._values = values
        self._coeffs = None
        if coeffs is not None:
            coeffs = np.asarray(coeffs, dtype=complex)
            coeffs.setflags(write=False)
            self._coeffs = coeffs

    @classmethod
    def from_coeffs(cls, grid: TorusGrid, coeffs) -> "Field":
        coeffs = np.array(coeffs, dtype=complex)
        coeffs[0] = coeffs[0].real
        coeffs[-1] = coeffs[-1].real
        values = np.fft.irfft(coeffs * grid.n_points, n=grid.n_points)
        return cls(grid, values, coeffs)

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def coeffs(self) -> np.ndarray:
        """Complex coefficients c_0..c_{n/2}."""
        if self._coeffs is None:
            c = np.fft.rfft(self._values) / self.grid.n_points
            c.setflags(write=False)
            self._coeffs = c
        return self._coeffs

    def spectral(self) -> np.ndarray:
        """Coefficients for every mode -n/2+1..n/2, conjugate symmetric."""
        c = self.coeffs
        neg = np.conj(c[1:-1][::-1])
        return np.concatenate([neg, c])

    def _check(self, other: "Field"):
        if other.grid != self.grid:
            raise ValueError("fields live on different grids")

    def __add__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.grid, self._values + other._values)
        return Field(self.grid, self._values + other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.grid, self._values - other._values)
        return Field(self.grid, self._values - other)

    def __mul__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.grid, self._values * other._values)
        return Field(self.grid, self._values * other)

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self._values)

    def __repr__(self):
        return f"Field(n={self.grid.n_points}, min={self._values.min():.4g}, max={self._values.max():.4g})"

    def derivative(self, order: int = 1) -> "Field":
        k = self.grid.wavenumbers
        c = self.coeffs * (1j * k) ** order
        if order % 2:
            c[-1] = 0.0
        return Field.from_coeffs(self.grid, c)

    def integral(self) -> float:
        return float(self._values.sum() * self.grid.spacing)

    def l2_norm(self) -> float:
        return math.sqrt(float(np.dot(self._values, self._values)) * self.grid.spacing)

    def sup_norm(self) -> float:
        return float(np.abs(self._values).max())

    def spectral_energy(self) -> float:
        """2*pi * sum over all modes of |c_k|^2 (equals the squared L2 norm)."""
        c = self.coeffs
        w = np.full(c.shape, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return TWO_PI * float(np.sum(w * np.abs(c) ** 2))

    def significant_modes(self, rtol: float = 1e-15) -> int:
        """Smallest K such that every mode above K is below rtol * max|c|."""
        a = np.abs(self.coeffs)
        big = np.nonzero(a > rtol * max(a.max(), 1e-300))[0]
        return int(big[-1]) if big.size else 0

    def evaluate(self, x, rtol: float = 1e-15) -> np.ndarray:
        """Trigonometric interpolation at arbitrary points.

        Modes below ``rtol`` relative to the largest coefficient are dropped.
        """
        x = np.asarray(x, dtype=float)
        K = self.significant_modes(rtol)
        c = self.coeffs
        nyq = self.grid.n_points // 2
        out = np.full(x.shape, c[0].real)
        if K == 0:
            return out
        z = np.exp(1j * x)
        zk = np.ones_like(z)
        for k in range(1, K + 1):
            zk = zk * z
            if k == nyq:
                out += c[k].real * zk.real
            else:
                out += 2.0 * (c[k] * zk).real
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "value"])
            for xi, vi in zip(self.grid.nodes, self._values):
                w.writerow([repr(float(xi)), repr(float(vi))])

    @classmethod
    def from_csv(cls, path) -> "Field":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        grid = TorusGrid(len(rows))
        return cls(grid, [float(r["value"]) for r in rows])


def basis_eval(z: int, x):
    """Orthonormal real Fourier basis e_z on the torus."""
    x = np.asarray(x, dtype=float)
    if z > 0:
        return np.sin(z * x) / math.sqrt(math.pi)
    if z == 0:
        return np.full(x.shape, 1.0 / math.sqrt(TWO_PI)) if x.ndim else 1.0 / math.sqrt(TWO_PI)
    return np.cos(z * x) / math.sqrt(math.pi)


def basis_field(grid: TorusGrid, z: int) -> Field:
    return Field(grid, np.broadcast_to(basis_eval(z, grid.nodes), (grid.n_points,)))


def heat_propagate(f: Field, t: float) -> Field:
    if t < 0:
        raise ValueError(f"heat semigroup needs t >= 0, got {t}")
    if t == 0:
        return f
    k = f.grid.wavenumbers
    return Field.from_coeffs(f.grid, f.coeffs * np.exp(-t * k * k))


def convolve(f: Field, g: Field) -> Field:
    """Periodic convolution h(x) = int f(x - y) g(y) dy."""
    if f.grid != g.grid:
        raise ValueError("convolve: fields live on different grids")
    return Field.from_coeffs(f.grid, TWO_PI * f.coeffs * g.coeffs)


# --- Bessel I0 and the Von Mises mollifier -------------------------------

_SERIES_MAX_U = 20.0


def _log_i0_series(u: float) -> float:
    q = 0.25 * u * u
    term = 1.0
    total = 1.0
    k = 0
    while True:
        k += 1
        term *= q / (k * k)
        total += term
        if term < 1e-16 * total:
            return math.log(total)


def _log_i0_asymptotic(u: float) -> float:
    # I0(u) ~ e^u / sqrt(2 pi u) * sum_k ((2k-1)!!)^2 / (k! (8u)^k)
    total = 1.0
    term = 1.0
    k = 0
    while True:
        k += 1
        nxt = term * (2 * k - 1) ** 2 / (k * 8.0 * u)
        if nxt >= term or nxt < 1e-17 * total:
            break
        term = nxt
        total += term
    return u - 0.5 * math.log(TWO_PI * u) + math.log(total)


def bessel_i0_log(u: float) -> float:
    """log I0(u) for u > 0."""
    if not u > 0:
        raise ValueError(f"bessel_i0_log needs u > 0, got {u}")
    if u <= _SERIES_MAX_U:
        return _log_i0_series(u)
    return _log_i0_asymptotic(u)


@dataclass(frozen=True)
class MollifierParam:
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def log_norm(self) -> float:
        """log(2 pi I0(1/eps))."""
        return math.log(TWO_PI) + bessel_i0_log(1.0 / self.epsilon)

    @property
    def floor(self) -> float:
        """m_eps = exp(-1/eps) / (2 pi I0(1/eps)), the global minimum at x = pi."""
        return math.exp(-1.0 / self.epsilon - self.log_norm)

    @property
    def peak(self) -> float:
        """M_eps = exp(1/eps) / (2 pi I0(1/eps)), the maximum at x = 0."""
        return math.exp(1.0 / self.epsilon - self.log_norm)

    @property
    def derivative_bound(self) -> float:
        """D_eps = M_eps / eps, an upper bound for |Phi_eps'|."""
        return self.peak / self.epsilon

    def fourier_ratios(self, kmax: int) -> np.ndarray:
        """I_k(1/eps) / I_0(1/eps) for k = 0..kmax; Phi_eps has c_k = ratio_k / (2 pi)."""
        u = 1.0 / self.epsilon
        k = np.arange(kmax + 1)
        return ive(k, u) / ive(0, u)

    def n_modes(self, rtol: float = 1e-17) -> int:
        """Number of Fourier modes carrying the mollifier to relative accuracy rtol."""
        k = 8
        while True:
            r = self.fourier_ratios(k)
            small = np.nonzero(r < rtol)[0]
            if small.size:
                return int(small[0])
            k *= 2


def mollifier_eval(p: MollifierParam, x):
    """Von Mises density exp(cos(x)/eps) / (2 pi I0(1/eps))."""
    x = np.asarray(x, dtype=float)
    if p.epsilon < 0.2:
        return np.exp(np.cos(x) / p.epsilon - p.log_norm)
    return np.exp(np.cos(x) / p.epsilon) / math.exp(p.log_norm)


def mollifier_field(grid: TorusGrid, p: MollifierParam) -> Field:
    return Field(grid, mollifier_eval(p, grid.nodes))


def mollify(g: Field, p: MollifierParam) -> Field:
    """Phi_eps * g, using the exact Fourier coefficients of the Von Mises density."""
    r = p.fourier_ratios(g.grid.n_points // 2)
    return Field.from_coeffs(g.grid, g.coeffs * r)


# --- cutoff ---------------------------------------------------------------

@dataclass(frozen=True)
class CutoffParam:
    M: float

    def __post_init__(self):
        if not self.M > 0:
            raise ValueError(f"cutoff level M must be positive, got {self.M}")


def cutoff(p: Union[CutoffParam, float], a):
    """chi_M: identity on [-M, M], zero outside (-2M, 2M), linear bridge in between."""
    M = p.M if isinstance(p, CutoffParam) else float(p)
    if math.isinf(M):
        return np.asarray(a, dtype=float) if np.ndim(a) else float(a)
    a = np.asarray(a, dtype=float)
    r = np.abs(a)
    out = np.where(r <= M, a, np.where(r >= 2 * M, 0.0, np.sign(a) * (2 * M - r)))
    return out if out.ndim else float(out)


# --- pairings and norms ---------------------------------------------------

def pairing(f, m) -> float:
    """<f, m> for a Field m (trapezoid quadrature) or a weighted ensemble m."""
    if isinstance(m, Field):
        if isinstance(f, Field):
            m._check(f)
            fv = f.values
        else:
            fv = np.broadcast_to(f(m.grid.nodes), m.values.shape)
        return float(np.dot(fv, m.values) * m.grid.spacing)
    x, a = np.asarray(m.positions), np.asarray(m.weights)
    fv = f.evaluate(x) if isinstance(f, Field) else np.broadcast_to(f(x), x.shape)
    return float(np.mean(a * fv))


def sobolev_norm(f: Field, k: int) -> float:
    """H^k norm: sqrt(sum_{i<=k} ||d^i f||_{L2}^2), derivatives taken spectrally."""
    if k < 0 or k > 4:
        raise ValueError(f"sobolev_norm supports 0 <= k <= 4, got {k}")
    c = f.coeffs
    a2 = np.abs(c) ** 2
    w = np.full(c.shape, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    total = a2.sum()
    if total > 0 and k > 0 and a2[-1] / total > 1e-3:
        warnings.warn("sobolev_norm: Nyquist mode holds more than 1e-3 of the energy; "
                      "derivatives are under-resolved", RuntimeWarning, stacklevel=2)
    kk = f.grid.wavenumbers ** 2
    mult = sum(kk ** i for i in range(k + 1))
    return math.sqrt(TWO_PI * float(np.sum(w * a2 * mult)))


def read_field(path: Union[str, Path]) -> Field:
    return Field.from_csv(path)
