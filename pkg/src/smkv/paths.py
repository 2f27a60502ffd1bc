"""Driving paths: Brownian samples, piecewise-linear approximants, Hoelder
seminorms, Riemann-Stieltjes integrals and heat convolutions of paths, and
the trace-class noise description."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np


class SampledPath:
    """Real path on a strictly increasing time mesh, linear between nodes."""

    __slots__ = ("times", "values")

    def __init__(self, times, values):
        times = np.array(times, dtype=float)
        values = np.array(values, dtype=float)
        if times.ndim != 1 or times.shape != values.shape or times.size < 2:
            raise ValueError("a path needs matching 1-d times/values with at least two nodes")
        if not np.all(np.diff(times) > 0):
            raise ValueError("path times must be strictly increasing")
        times.setflags(write=False)
        values.setflags(write=False)
        self.times = times
        self.values = values

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def t0(self) -> float:
        return float(self.times[0])

    def __call__(self, t):
        return np.interp(t, self.times, self.values)

    def __add__(self, other: "SampledPath") -> "SampledPath":
        mesh = np.union1d(self.times, other.times)
        return SampledPath(mesh, self(mesh) + other(mesh))

    def __mul__(self, c: float) -> "SampledPath":
        return SampledPath(self.times, self.values * c)

    __rmul__ = __mul__

    def __len__(self):
        return self.times.size

    def __repr__(self):
        return f"SampledPath(n={self.times.size}, T={self.T:g})"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "value"])
            for t, v in zip(self.times, self.values):
                w.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "SampledPath":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([float(r["t"]) for r in rows], [float(r["value"]) for r in rows])


def linear_path(T: float, slope: float = 1.0, n: int = 2) -> SampledPath:
    t = np.linspace(0.0, T, n)
    return SampledPath(t, slope * t)


# --- random streams -------------------------------------------------------

_KIND_CODES = {"beta": 1, "noise": 2, "init": 3, "aux": 4}


def _zigzag(z: int) -> int:
    return 2 * z if z >= 0 else -2 * z - 1


@dataclass(frozen=True)
class RngStreams:
    """Named, order-independent substreams derived from one master seed.

    Each substream is a Philox generator keyed by (seed, kind, replication,
    index), so draws never depend on which other streams were consumed.
    """

    seed: int
    replication: int = 0

    def substream(self, kind: str, index: int = 0) -> np.random.Generator:
        if kind not in _KIND_CODES:
            raise KeyError(f"unknown stream kind {kind!r}")
        ss = np.random.SeedSequence(
            entropy=int(self.seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(_KIND_CODES[kind], int(self.replication), _zigzag(int(index))),
        )
        return np.random.Generator(np.random.Philox(ss))

    def with_replication(self, r: int) -> "RngStreams":
        return RngStreams(self.seed, r)


def step_mesh(T: float, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    if dt > T:
        raise ValueError(f"time step {dt} exceeds horizon {T}")
    n = int(math.ceil(T / dt - 1e-9))
    t = np.arange(n + 1) * dt
    t[-1] = T
    return t


def sample_brownian(T: float, dt: float, stream: np.random.Generator) -> SampledPath:
    """Standard Brownian motion sampled on the uniform mesh of step dt."""
    t = step_mesh(T, dt)
    dw = stream.standard_normal(t.size - 1) * np.sqrt(np.diff(t))
    return SampledPath(t, np.concatenate([[0.0], np.cumsum(dw)]))


def piecewise_linear_approx(p: SampledPath, kappa: int) -> SampledPath:
    """Interpolant of p on the uniform mesh with kappa segments."""
    if kappa < 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    mesh = np.linspace(p.t0, p.T, int(kappa) + 1)
    return SampledPath(mesh, p(mesh))


def holder_seminorm(p: SampledPath, gamma: float, max_nodes: int = 2000) -> float:
    """max |p(t) - p(s)| / |t - s|^gamma over sampled node pairs."""
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    t, v = p.times, p.values
    if t.size > max_nodes:
        idx = np.unique(np.linspace(0, t.size - 1, max_nodes).round().astype(int))
        t, v = t[idx], v[idx]
    best = 0.0
    for i in range(t.size - 1):
        dt = t[i + 1:] - t[i]
        r = np.abs(v[i + 1:] - v[i]) / dt ** gamma
        best = max(best, float(r.max()))
    return best


def rs_integral(f: SampledPath, Y: SampledPath) -> float:
    """Left-point Riemann-Stieltjes sum of f dY over the union mesh."""
    if not (math.isclose(f.t0, Y.t0, abs_tol=1e-12) and math.isclose(f.T, Y.T, rel_tol=1e-12)):
        raise ValueError(f"domain mismatch: [{f.t0}, {f.T}] vs [{Y.t0}, {Y.T}]")
    mesh = np.union1d(f.times, Y.times)
    return float(np.sum(f(mesh[:-1]) * np.diff(Y(mesh))))


# --- heat convolution of paths --------------------------------------------

def _phi1(k2, h):
    """(1 - exp(-k2 h)) / k2, with the k2 -> 0 limit h."""
    k2 = np.asarray(k2, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -np.expm1(-k2 * h) / k2
    return np.where(k2 == 0, h, out)


def convolution_increment(Y: SampledPath, t0: float, t1: float, k2) -> np.ndarray:
    """int_{t0}^{t1} exp(-(t1 - s) k2) dY_s, exact for piecewise-linear Y.

    ``k2`` is an array of squared wavenumbers; the result has its shape.
    """
    k2 = np.asarray(k2, dtype=float)
    if t1 <= t0:
        return np.zeros(k2.shape)
    inner = Y.times[(Y.times > t0) & (Y.times < t1)]
    knots = np.concatenate([[t0], inner, [t1]])
    vals = Y(knots)
    out = np.zeros(k2.shape)
    for a, b, ya, yb in zip(knots[:-1], knots[1:], vals[:-1], vals[1:]):
        h = b - a
        r = (yb - ya) / h
        out += np.exp(-k2 * (t1 - b)) * r * _phi1(k2, h)
    return out


def heat_convolution_mode(z: int, Y: SampledPath, t: float) -> float:
    """I_z(t) = int_0^t exp(-(t - s) z^2) dY_s via the one-step recurrence."""
    if t < Y.t0 or t > Y.T + 1e-12:
        raise ValueError(f"t={t} outside the path domain [{Y.t0}, {Y.T}]")
    k2 = float(z) ** 2
    knots = np.concatenate([Y.times[Y.times < t], [t]])
    vals = Y(knots)
    I = 0.0
    for a, b, ya, yb in zip(knots[:-1], knots[1:], vals[:-1], vals[1:]):
        h = b - a
        if z == 0:
            I += yb - ya
        else:
            decay = math.exp(-k2 * h)
            I = decay * I + (yb - ya) / h * (1.0 - decay) / k2
    return I


def heat_convolution_series(z: int, Y: SampledPath, times: Sequence[float]) -> np.ndarray:
    """I_z evaluated at every requested (increasing) time."""
    times = np.asarray(times, dtype=float)
    out = np.empty(times.size)
    I, prev = 0.0, Y.t0
    k2 = float(z) ** 2
    for j, t in enumerate(times):
        I = math.exp(-k2 * (t - prev)) * I + float(convolution_increment(Y, prev, t, k2))
        out[j] = I
        prev = t
    return out


# --- trace-class noise ----------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """Eigenvalues lambda_z of the noise, truncated at |z| <= m_max.

    ``decay`` holds (c, p) when lambda_z = c |z|^-p for z != 0 (lambda_0 = c).
    """

    lambdas: Mapping[int, float]
    decay: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        lam = {int(z): float(v) for z, v in self.lambdas.items()}
        if any(v < 0 for v in lam.values()):
            raise ValueError("noise eigenvalues must be non-negative")
        if not any(v > 0 for v in lam.values()):
            raise ValueError("noise eigenvalues are identically zero")
        object.__setattr__(self, "lambdas", dict(sorted(lam.items())))

    @classmethod
    def from_decay(cls, c: float, p: float, m: int) -> "NoiseSpec":
        lam = {z: (c if z == 0 else c * abs(z) ** (-p)) for z in range(-m, m + 1)}
        return cls(lam, decay=(float(c), float(p)))

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "NoiseSpec":
        """Explicit list for modes -m..m (length 2m + 1)."""
        values = list(values)
        if len(values) % 2 != 1:
            raise ValueError("lambda list must have odd length 2m+1 (modes -m..m)")
        m = len(values) // 2
        return cls({z: values[z + m] for z in range(-m, m + 1)})

    @property
    def m_max(self) -> int:
        return max(abs(z) for z in self.lambdas)

    def modes(self):
        return [z for z, v in self.lambdas.items() if v > 0]

    def truncate(self, m: int) -> "NoiseSpec":
        return NoiseSpec({z: v for z, v in self.lambdas.items() if abs(z) <= m}, self.decay)


def eigenvalue_decay_check(spec: NoiseSpec, delta: float):
    """Check sum_z lambda_z^2 |z|^{4 delta} < inf; returns (ok, diagnostic)."""
    if not 0 < delta < 0.5:
        raise ValueError(f"delta must lie in (0, 1/2), got {delta}")
    diag: Dict[str, object] = {"delta": delta}
    if spec.decay is None:
        lam = spec.lambdas
        diag["partial_sums"] = {
            L: sum(v * v * abs(z) ** (4 * delta) for z, v in lam.items() if abs(z) <= L)
            for L in _dyadic(spec.m_max)
        }
        diag["rule"] = "finite support"
        return True, diag
    c, p = spec.decay
    exponent = 2 * p - 4 * delta
    diag["exponent"] = exponent
    diag["partial_sums"] = {
        L: c * c + 2 * sum(c * c * z ** (4 * delta - 2 * p) for z in range(1, L + 1))
        for L in _dyadic(max(spec.m_max, 1024))
    }
    diag["rule"] = "p-series: converges iff 2p - 4 delta > 1"
    return bool(exponent > 1), diag


def _dyadic(top: int):
    L, out = 1, []
    while L <= max(top, 1):
        out.append(L)
        L *= 2
    return out


def tail_remainder(spec: NoiseSpec, paths: Mapping[int, SampledPath], L: float,
                   times: Iterable[float]) -> float:
    """sup over times of sum_{|z| >= L} z^2 lambda_z^2 |I_z(t)|^2."""
    if L < 0:
        raise ValueError("tail cutoff L must be non-negative")
    times = np.asarray(list(times), dtype=float)
    total = np.zeros(times.size)
    for z, lam in spec.lambdas.items():
        if abs(z) < L or lam == 0 or z == 0:
            continue
        I = heat_convolution_series(z, paths[z], times)
        total += z * z * lam * lam * I * I
    return float(total.max()) if total.size else 0.0


def brownian_family(spec: NoiseSpec, T: float, dt: float, streams: RngStreams) -> Dict[int, SampledPath]:
    """Independent Brownian sample per noise mode, keyed by mode."""
    return {z: sample_brownian(T, dt, streams.substream("noise", z)) for z in spec.lambdas}


# --- forcing: spatial profiles paired with driving paths -------------------

@dataclass(frozen=True)
class Forcing:
    """Sum of profile_p(x) dY^p_t terms.

    A single-path forcing is ``q(x) dY``; the m-mode forcing uses the profiles
    lambda_z e_z(x) with one path per mode.
    """

    profiles: Tuple[object, ...]
    paths: Tuple[SampledPath, ...]
    modes: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if len(self.profiles) != len(self.paths):
            raise ValueError("each forcing profile needs exactly one driving path")

    @classmethod
    def single(cls, q, Y: SampledPath) -> "Forcing":
        return cls((q,), (Y,))

    @classmethod
    def from_noise(cls, grid, spec: NoiseSpec, paths: Mapping[int, SampledPath],
                   m: Optional[int] = None) -> "Forcing":
        from smkv.torus import basis_field

        zs = [z for z in spec.modes() if m is None or abs(z) <= m]
        profiles = tuple(basis_field(grid, z) * spec.lambdas[z] for z in zs)
        return cls(profiles, tuple(paths[z] for z in zs), tuple(zs))

    @classmethod
    def none(cls) -> "Forcing":
        return cls((), ())

    def approximated(self, kappa: Optional[int]) -> "Forcing":
        if kappa is None:
            return self
        return Forcing(self.profiles, tuple(piecewise_linear_approx(p, kappa) for p in self.paths),
                       self.modes)

    def increments(self, t0: float, t1: float) -> np.ndarray:
        return np.array([float(p(t1) - p(t0)) for p in self.paths])

    def __len__(self):
        return len(self.paths)
