"""Weighted interacting particle system with common-noise weights.

Positions follow

    dX^i = -(V'(X^i) + (1/N) sum_j chi_M(A^j) F'(X^i - X^j)) dt + sqrt(2) dbeta^i

and weights follow

    dA^i = sum_p g_p(X^i) / (Phi_eps * zeta^N)(X^i) dY^p

where the profiles g_p are either the single forcing profile q or the modal
profiles lambda_z e_z.  The same stepping engine, fed with grid fields in
place of the empirical quantities, evolves the mean-field ensembles used as
references by the PDE solvers.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from smkv import kernels
from smkv.paths import Forcing, RngStreams, SampledPath, step_mesh
from smkv.torus import (TWO_PI, CutoffParam, Field, MollifierParam, TorusGrid,
                        basis_eval, cutoff, mollifier_eval)

DIRECT_MAX_N = 10_000


class LowerBoundViolation(ArithmeticError):
    """A positivity floor (denominator or density) was crossed."""


# --- potentials and initial law -------------------------------------------

class Potentials:
    """Environmental potential V, interaction potential F and forcing profile q."""

    def __init__(self, V: Field, F: Field, q: Field):
        if not (V.grid == F.grid == q.grid):
            raise ValueError("potentials must share one grid")
        self.grid = V.grid
        self.V, self.F, self.q = V, F, q
        self.dV = V.derivative()
        self.dF = F.derivative()
        self.ddV = V.derivative(2)
        self.ddF = F.derivative(2)
        self.dq = q.derivative()
        K = self.dF.significant_modes(1e-15)
        c = np.array(self.dF.coeffs[1:K + 1])
        scale = np.full(K, 2.0)
        if K == self.grid.n_points // 2:
            scale[-1] = 1.0
        # F'(d) = sum_k fp_cos[k] cos(k d) + fp_sin[k] sin(k d)
        self.fp_cos = scale * c.real
        self.fp_sin = -scale * c.imag
        self.fp_coeffs = c

    @classmethod
    def from_functions(cls, grid: TorusGrid, V, F, q) -> "Potentials":
        return cls(grid.field(V), grid.field(F), grid.field(q))

    def sup(self, name: str) -> float:
        return getattr(self, name).sup_norm()

    def interaction(self, d):
        """F'(d) evaluated from its Fourier series."""
        d = np.asarray(d, dtype=float)
        out = np.zeros(d.shape)
        for k, (a, b) in enumerate(zip(self.fp_cos, self.fp_sin), start=1):
            out += a * np.cos(k * d) + b * np.sin(k * d)
        return out


@dataclass(frozen=True)
class InitialLaw:
    """Product law zeta0(x) dx times a weight marginal.

    ``weight_law`` is ("dirac", a) or ("normal", mean, variance).
    """

    zeta0: Field
    weight_law: tuple = ("normal", 1.0, 0.25)

    def __post_init__(self):
        eta = float(self.zeta0.values.min())
        if not eta > 0:
            raise ValueError(f"initial density must be strictly positive, min is {eta:.3g}")
        if not math.isclose(self.zeta0.integral(), 1.0, rel_tol=1e-8):
            raise ValueError(f"initial density must integrate to 1, got {self.zeta0.integral()}")

    @property
    def eta(self) -> float:
        return float(self.zeta0.values.min())

    @property
    def mean_weight(self) -> float:
        return float(self.weight_law[1])

    @property
    def rho0(self) -> Field:
        return self.zeta0 * self.mean_weight

    def sample(self, N: int, rng: np.random.Generator):
        z = self.zeta0
        spread = z.values.max() - z.values.min()
        if spread <= 1e-14 * z.values.max():
            x = rng.uniform(0.0, TWO_PI, N)
        else:
            top = z.values.max() * 1.05
            out: List[np.ndarray] = []
            have = 0
            while have < N:
                cand = rng.uniform(0.0, TWO_PI, 2 * (N - have) + 16)
                u = rng.uniform(0.0, top, cand.size)
                keep = cand[u < z.evaluate(cand)]
                out.append(keep)
                have += keep.size
            x = np.concatenate(out)[:N]
        kind = self.weight_law[0]
        if kind == "dirac":
            a = np.full(N, float(self.weight_law[1]))
        elif kind == "normal":
            a = self.weight_law[1] + math.sqrt(self.weight_law[2]) * rng.standard_normal(N)
        else:
            raise ValueError(f"unknown weight law {kind!r}")
        return x, a


def uniform_law(grid: TorusGrid, weight_law=("normal", 1.0, 0.25)) -> InitialLaw:
    return InitialLaw(grid.constant(1.0 / TWO_PI), weight_law)


# --- ensemble state --------------------------------------------------------

@dataclass(frozen=True)
class ParticleEnsemble:
    positions: np.ndarray
    weights: np.ndarray
    epsilon: MollifierParam
    M: float = math.inf
    kappa: Optional[int] = None
    m: Optional[int] = None
    t: float = 0.0

    def __post_init__(self):
        x = np.mod(np.asarray(self.positions, dtype=float), TWO_PI)
        # mod can round 2*pi - tiny up to 2*pi itself
        x[x >= TWO_PI] = 0.0
        a = np.asarray(self.weights, dtype=float)
        if x.ndim != 1 or x.shape != a.shape or x.size < 1:
            raise ValueError("ensemble needs N >= 1 matching positions and weights")
        if not np.all(np.isfinite(a)):
            raise ValueError("ensemble weights must be finite")
        x.setflags(write=False)
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "weights", a)
        if not isinstance(self.epsilon, MollifierParam):
            object.__setattr__(self, "epsilon", MollifierParam(float(self.epsilon)))

    @property
    def N(self) -> int:
        return self.positions.size

    def evolve(self, positions, weights, dt) -> "ParticleEnsemble":
        return replace(self, positions=positions, weights=weights, t=self.t + dt)

    def permuted(self, perm) -> "ParticleEnsemble":
        perm = np.asarray(perm)
        return replace(self, positions=self.positions[perm], weights=self.weights[perm])


def init_ensemble(law: InitialLaw, N: int, streams: RngStreams, epsilon=1.0, M=math.inf,
                  kappa=None, m=None) -> ParticleEnsemble:
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    x, a = law.sample(int(N), streams.substream("init"))
    return ParticleEnsemble(x, a, epsilon, M, kappa, m)


# --- empirical functionals ------------------------------------------------

def _cutoff_weights(e: ParticleEnsemble) -> np.ndarray:
    return np.asarray(cutoff(e.M, e.weights), dtype=float)


class _Powers:
    """Rows cos(k x), sin(k x) for k = 1..K at fixed points, extended on demand."""

    def __init__(self, x, workspace: Optional[dict] = None):
        self.x = np.ascontiguousarray(x, dtype=float)
        self._ws = workspace
        self._K = 0
        self._C = self._S = None

    def upto(self, K: int):
        if K > self._K:
            # rebuilding from scratch keeps every row identical whatever K was asked first
            size = max(K, 2 * self._K)
            out = None
            if self._ws is not None:
                buf = self._ws.get("trig")
                if buf is None or buf[0].shape[0] < size or buf[0].shape[1] != self.x.size:
                    buf = (np.empty((size, self.x.size)), np.empty((size, self.x.size)))
                    self._ws["trig"] = buf
                out = (buf[0][:size], buf[1][:size])
            self._C, self._S = kernels.trig_table(self.x, size, out=out)
            self._K = size
        return self._C[:K], self._S[:K]

    def modes(self, w, K: int) -> np.ndarray:
        """S_k = (1/N) sum_j w_j exp(-i k x_j), k = 1..K."""
        C, S = self.upto(K)
        w = np.asarray(w, dtype=float)
        return (C @ w - 1j * (S @ w)) / self.x.size

    def synth(self, coeffs) -> np.ndarray:
        """sum_k 2 Re(coeffs[k-1] exp(i k x)), k = 1..K."""
        coeffs = np.asarray(coeffs)
        if coeffs.size == 0:
            return np.zeros(self.x.shape)
        C, S = self.upto(coeffs.size)
        return 2.0 * (coeffs.real @ C - coeffs.imag @ S)

    def field(self, f: Field, rtol: float = 1e-15) -> np.ndarray:
        """Trigonometric interpolation of f, as Field.evaluate."""
        K = f.significant_modes(rtol)
        if K >= f.grid.n_points // 2:
            return f.evaluate(self.x, rtol)
        return f.coeffs[0].real + self.synth(f.coeffs[1:K + 1])


def _empirical_modes(x, w, K):
    """S_k = (1/N) sum_j w_j exp(-i k x_j) for k = 1..K, shape (K,)."""
    return _Powers(x).modes(w, K)


def _synthesize(x, coeffs):
    """sum_k 2 Re(coeffs[k-1] exp(i k x)) for k = 1..K."""
    return _Powers(x).synth(coeffs)


@lru_cache(maxsize=64)
def _density_ratios(epsilon: float) -> np.ndarray:
    eps = MollifierParam(epsilon)
    r = eps.fourier_ratios(eps.n_modes())[1:]
    r.setflags(write=False)
    return r


def _mollifier_shift(eps: MollifierParam) -> float:
    # Phi(d) = exp((cos d - 1)/eps - shift)
    return eps.log_norm - 1.0 / eps.epsilon


def pair_terms(e: ParticleEnsemble, pot: Potentials, method: str = "auto",
               literal_cutoff: bool = False, nthreads: int = 1, want_density: bool = True,
               powers: Optional[_Powers] = None):
    """Interaction sums Gamma_i and mollified densities at every particle.

    ``method`` is "direct" (O(N^2) compiled or NumPy kernel), "spectral"
    (exact Fourier-mode accumulation, O(N K)) or "auto".
    """
    if method == "auto":
        method = "direct" if e.N <= DIRECT_MAX_N else "spectral"
    x = e.positions
    w = np.ones(e.N) if literal_cutoff else _cutoff_weights(e)
    eps = e.epsilon
    if method == "direct":
        gam, dens = kernels.pair_sums(x, w, pot.fp_cos, pot.fp_sin, 1.0 / eps.epsilon,
                                      _mollifier_shift(eps), True, want_density, nthreads)
    elif method == "spectral":
        pw = powers or _Powers(x)
        K = pot.fp_coeffs.size
        gam = pw.synth(pot.fp_coeffs * pw.modes(w, K)) if K else np.zeros(e.N)
        dens = None
        if want_density:
            r = _density_ratios(eps.epsilon)
            dens = (1.0 + pw.synth(r * pw.modes(np.ones(e.N), r.size))) / TWO_PI
    else:
        raise ValueError(f"unknown interaction method {method!r}")
    if literal_cutoff:
        gam = gam * _cutoff_weights(e)
    return gam, dens


def interaction_drift(i: int, e: ParticleEnsemble, pot: Potentials, literal_cutoff=False) -> float:
    """-V'(X^i) - (1/N) sum_j chi_M(A^j) F'(X^i - X^j)."""
    xi = e.positions[i]
    fp = pot.interaction(xi - e.positions)
    if literal_cutoff:
        gam = cutoff(e.M, e.weights[i]) * fp.mean()
    else:
        gam = float(np.dot(_cutoff_weights(e), fp)) / e.N
    return float(-pot.dV.evaluate(xi) - gam)


def mollified_density(e: ParticleEnsemble, x):
    """(Phi_eps * zeta^N)(x) = (1/N) sum_j Phi_eps(x - X^j)."""
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1)
    out = np.array([mollifier_eval(e.epsilon, xi - e.positions).mean() for xi in flat])
    return out.reshape(x.shape) if x.ndim else float(out[0])


def weight_drift_coeffs(i: int, e: ParticleEnsemble, profiles: Sequence[Field],
                        denominator: Optional[float] = None) -> np.ndarray:
    """c_p = g_p(X^i) / (Phi_eps * zeta^N)(X^i) for every forcing profile."""
    xi = e.positions[i]
    d = mollified_density(e, xi) if denominator is None else denominator
    return np.array([float(g.evaluate(xi)) / d for g in profiles])


def gamma_m(x, positions, weights, pot: Potentials, M=math.inf):
    """Gamma_M(x, mu) = int chi_M(a) F'(x - y) mu(dy da) for an equal-weight discrete mu."""
    w = np.asarray(cutoff(M, weights), dtype=float)
    x = np.asarray(x, dtype=float)
    d = x[..., None] - np.asarray(positions)[None, :] if x.ndim else x - np.asarray(positions)
    return (pot.interaction(d) * w).mean(axis=-1)


def xi_eps(x, positions, pot: Potentials, eps: MollifierParam):
    """Xi_eps(x, mu) = q(x) / int Phi_eps(x - y) mu(dy da)."""
    x = np.asarray(x, dtype=float)
    d = x[..., None] - np.asarray(positions)[None, :] if x.ndim else x - np.asarray(positions)
    return pot.q.evaluate(x) / mollifier_eval(eps, d).mean(axis=-1)


def lipschitz_constants(pot: Potentials, M: float, eps: MollifierParam, n: int = 0):
    """Constants K(n, M) and K~_eps of the Lipschitz estimates for Gamma_M and Xi_eps."""
    Fn1 = pot.F.derivative(n + 1).sup_norm()
    K = max(M, 1.0) * Fn1
    Kt = (pot.q.sup_norm() * eps.derivative_bound + pot.dq.sup_norm() * eps.peak) / eps.floor ** 2
    return K, Kt


def squared_lipschitz_bounds(pot: Potentials, M: float, eps: MollifierParam, n: int = 0):
    """Constants C with |G(x, mu) - G(y, nu)|^2 <= C (|x - y|^2 + W2(mu, nu)^2).

    For the n-th derivative of Gamma_M the (y, a) Lipschitz constant of
    chi_M(a) F^(n+1)(x - y) is sqrt(|F^(n+1)|^2 + M^2 |F^(n+2)|^2) and the x
    constant is M |F^(n+2)|; Cauchy-Schwarz then squares the sum of the two
    terms.  Xi_eps is handled the same way with the mollifier bounds.
    """
    f1 = pot.F.derivative(n + 1).sup_norm()
    f2 = pot.F.derivative(n + 2).sup_norm()
    Kg = f1 ** 2 + 2.0 * M * M * f2 ** 2
    q, dq = pot.q.sup_norm(), pot.dq.sup_norm()
    a = q * eps.derivative_bound / eps.floor ** 2
    b = dq / eps.floor + q * eps.derivative_bound / eps.floor ** 2
    return Kg, a * a + b * b


# --- stepping --------------------------------------------------------------

def _check_increments(e, dY, dBeta, n_profiles):
    dY = np.atleast_1d(np.asarray(dY, dtype=float))
    dBeta = np.asarray(dBeta, dtype=float)
    if dBeta.shape != (e.N,):
        raise ValueError(f"need {e.N} idiosyncratic increments, got shape {dBeta.shape}")
    if dY.shape != (n_profiles,):
        raise ValueError(f"need {n_profiles} common increments, got shape {dY.shape}")
    return dY, dBeta


def em_step(e: ParticleEnsemble, pot: Potentials, profiles: Optional[Sequence[Field]], dt: float,
            dY, dBeta, method: str = "auto", literal_cutoff: bool = False, nthreads: int = 1,
            floor_check: bool = True, diagnostics: Optional[dict] = None,
            workspace: Optional[dict] = None) -> ParticleEnsemble:
    """One explicit Euler-Maruyama step of the particle-weight system.

    ``dBeta`` are standard Brownian increments (variance dt); ``dY`` holds one
    common increment per forcing profile (``profiles=None`` means ``[pot.q]``).
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    profiles = [pot.q] if profiles is None else list(profiles)
    dY, dBeta = _check_increments(e, dY, dBeta, len(profiles))
    x = e.positions
    forced = bool(np.any(dY != 0)) and len(profiles) > 0
    pw = _Powers(x, workspace)
    gam, dens = pair_terms(e, pot, method, literal_cutoff, nthreads, want_density=forced, powers=pw)
    drift = -pw.field(pot.dV) - gam
    new_x = x + drift * dt + math.sqrt(2.0) * dBeta
    if not forced:
        return e.evolve(new_x, e.weights, dt)
    floor = e.epsilon.floor
    dmin = float(dens.min())
    if diagnostics is not None:
        diagnostics["min_denominator"] = min(diagnostics.get("min_denominator", math.inf), dmin)
        diagnostics["denominator_floor"] = floor
    if floor_check and dmin < floor * (1 - 1e-9):
        raise LowerBoundViolation(f"mollified density {dmin:.3e} fell below m_eps = {floor:.3e}")
    dA = np.zeros(e.N)
    for g, dy in zip(profiles, dY):
        if dy != 0:
            dA += pw.field(g) * dy
    return e.evolve(new_x, e.weights + dA / dens, dt)


def step_with_fields(e: ParticleEnsemble, drift: Field, denominator: Optional[Field],
                     profiles: Sequence[Field], dt: float, dY, dBeta,
                     workspace: Optional[dict] = None) -> ParticleEnsemble:
    """Mean-field step: positions use -drift(X), weights use g_p(X)/denominator(X).

    ``drift`` is the full field V' + (interaction) entering with a minus sign.
    """
    dY, dBeta = _check_increments(e, dY, dBeta, len(profiles))
    x = e.positions
    pw = _Powers(x, workspace)
    new_x = x - pw.field(drift) * dt + math.sqrt(2.0) * dBeta
    if not np.any(dY != 0):
        return e.evolve(new_x, e.weights, dt)
    if denominator is None:
        raise ValueError("a forced mean-field step needs a denominator field")
    dmin = float(denominator.values.min())
    if not dmin > 0:
        i = int(np.argmin(denominator.values))
        raise LowerBoundViolation(
            f"denominator field not positive: min {dmin:.3e} at x={denominator.grid.nodes[i]:.4f}")
    den = pw.field(denominator)
    dA = np.zeros(e.N)
    for g, dy in zip(profiles, dY):
        if dy != 0:
            dA += pw.field(g) * dy
    return e.evolve(new_x, e.weights + dA / den, dt)


def mean_field_ensemble_step(e: ParticleEnsemble, pot: Potentials, rho: Field, zeta: Field,
                             dt: float, dY, dBeta, profiles=None) -> ParticleEnsemble:
    """Pairs evolve independently given rho (drift V' + F' * rho) and zeta (weight denominator)."""
    from smkv.torus import convolve

    profiles = [pot.q] if profiles is None else list(profiles)
    drift = pot.dV + convolve(pot.dF, rho)
    return step_with_fields(e, drift, zeta, profiles, dt, dY, dBeta)


def gamma_field(grid: TorusGrid, pot: Potentials, positions, weights, M=math.inf) -> Field:
    """Gamma_M(., mu) on the grid for the empirical measure of (positions, weights)."""
    K = pot.fp_coeffs.size
    c = np.zeros(grid.n_points // 2 + 1, dtype=complex)
    if K:
        w = np.asarray(cutoff(M, weights), dtype=float)
        S = _empirical_modes(np.asarray(positions, dtype=float), w, K)
        c[1:K + 1] = pot.fp_coeffs * S
    return Field.from_coeffs(grid, c)


# --- idiosyncratic noise ---------------------------------------------------

class BetaSource:
    """Per-particle Brownian increments, one substream per particle index."""

    def __init__(self, streams: RngStreams, N: int, chunk: int = 256, order=None):
        idx = range(N) if order is None else order
        self._gens = [streams.substream("beta", int(i)) for i in idx]
        self._chunk = chunk
        self._buf = np.empty((0, N))
        self._pos = 0

    def next(self, dt: float) -> np.ndarray:
        if self._pos >= self._buf.shape[0]:
            self._buf = np.stack([g.standard_normal(self._chunk) for g in self._gens], axis=1)
            self._pos = 0
        row = self._buf[self._pos]
        self._pos += 1
        return row * math.sqrt(dt)


# --- full runs -------------------------------------------------------------

@dataclass
class TestFunction:
    __test__ = False  # not a pytest class despite the name

    name: str
    func: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        return np.broadcast_to(self.func(np.asarray(x, dtype=float)), np.shape(x))


def basis_test_function(z: int) -> TestFunction:
    return TestFunction(f"e{z}", lambda x, z=z: basis_eval(z, x))


ONE = TestFunction("one", lambda x: np.ones_like(x))


@dataclass
class ParticleRun:
    times: np.ndarray
    observables: Dict[str, np.ndarray]
    final: ParticleEnsemble
    diagnostics: dict = field(default_factory=dict)
    snapshots: Dict[float, ParticleEnsemble] = field(default_factory=dict)
    states: Optional[List[ParticleEnsemble]] = None


def simulate_particles(e0: ParticleEnsemble, pot: Potentials, forcing: Forcing, T: float, dt: float,
                       streams: RngStreams, test_functions: Sequence[TestFunction] = (),
                       method: str = "auto", literal_cutoff: bool = False, nthreads: int = 1,
                       snapshot_times: Sequence[float] = (), keep_states: bool = False,
                       beta_order=None) -> ParticleRun:
    """Euler-Maruyama run of the particle-weight system on [0, T].

    ``forcing`` must already hold the kappa-approximated paths.
    """
    times = step_mesh(T, dt)
    beta = BetaSource(streams, e0.N, order=beta_order)
    obs = {f.name: np.empty(times.size) for f in test_functions}
    snaps = {}
    pending = sorted(snapshot_times)
    states = [e0] if keep_states else None
    diag: dict = {"steps": times.size - 1}
    workspace: dict = {}

    def record(j, e):
        for f in test_functions:
            obs[f.name][j] = float(np.mean(e.weights * f(e.positions)))
        while pending and pending[0] <= times[j] + 1e-12:
            snaps[pending.pop(0)] = e

    e = e0
    record(0, e)
    for j in range(times.size - 1):
        t0, t1 = times[j], times[j + 1]
        h = t1 - t0
        e = em_step(e, pot, forcing.profiles, h, forcing.increments(t0, t1), beta.next(h),
                    method=method, literal_cutoff=literal_cutoff, nthreads=nthreads,
                    diagnostics=diag, workspace=workspace)
        record(j + 1, e)
        if keep_states:
            states.append(e)
    return ParticleRun(times, obs, e, diag, snaps, states)


def weighted_pairing_trajectory(run: ParticleRun, f: TestFunction) -> SampledPath:
    """t -> (1/N) sum_i A^i_t f(X^i_t) on the step mesh."""
    if f.name in run.observables:
        return SampledPath(run.times, run.observables[f.name])
    if run.states is None:
        raise KeyError(f"observable {f.name!r} was not recorded and states were not kept")
    return SampledPath(run.times, [float(np.mean(s.weights * f(s.positions))) for s in run.states])
