"""Pseudo-spectral solvers for the limiting equations on the torus.

All solvers advance Fourier coefficients c_k (rfft / n) of

    d_t u = d_xx u + d_x[b u] + sum_p g_p dY^p

with exponential time differencing: the heat factor exp(-k^2 h) is exact,
the flux d_x[b u] is evaluated pseudo-spectrally with 3/2 zero padding and
integrated by the ETD-Euler rule, and each forcing term enters mode by mode
through the exact heat convolution of its piecewise-linear driving path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from smkv.particles import (BetaSource, InitialLaw, Potentials, _empirical_modes, init_ensemble,
                            step_with_fields)
from smkv.paths import Forcing, RngStreams, SampledPath, _phi1, convolution_increment, step_mesh
from smkv.torus import (TWO_PI, Field, MollifierParam, TorusGrid, cutoff, mollify,
                        sobolev_norm)

REFERENCE_REPLICATION = 1 << 20


class StabilityViolation(ArithmeticError):
    """Time step too large for the explicit flux, or the solution blew up."""


class PositivityFloorViolation(ArithmeticError):
    """A density dropped below its certified lower bound."""


# --- spectral helpers ------------------------------------------------------

def _mode_weights(nk: int) -> np.ndarray:
    w = np.full(nk, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return w


def _to_values(c: np.ndarray, n: int) -> np.ndarray:
    return np.fft.irfft(c * n, n=n)


def _to_coeffs(v: np.ndarray) -> np.ndarray:
    return np.fft.rfft(v) / v.size


class _EtdStepper:
    """ETD-Euler update for one grid; caches the per-step factors."""

    def __init__(self, grid: TorusGrid, cfl_check: bool = True):
        self.grid = grid
        self.n = grid.n_points
        self.k = grid.wavenumbers.astype(float)
        self.k2 = self.k ** 2
        self.m = 3 * self.n // 2
        self.cfl_check = cfl_check
        self._cache: Dict[float, tuple] = {}
        self.max_cfl = 0.0

    def factors(self, h: float):
        f = self._cache.get(h)
        if f is None:
            f = (np.exp(-self.k2 * h), _phi1(self.k2, h))
            self._cache[h] = f
        return f

    def flux(self, b: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Coefficients of d_x[b u], dealiased by 3/2 zero padding."""
        nk = c.size
        mk = self.m // 2 + 1
        bp = np.zeros(mk, dtype=complex)
        cp = np.zeros(mk, dtype=complex)
        # the Nyquist mode is split between +-n/2 and dropped here
        bp[:nk - 1] = b[:nk - 1]
        cp[:nk - 1] = c[:nk - 1]
        prod = _to_values(bp, self.m) * _to_values(cp, self.m)
        pc = _to_coeffs(prod)[:nk]
        out = 1j * self.k * pc
        out[-1] = 0.0
        return out

    def step(self, c, h, b=None, forcing=None):
        E, P = self.factors(h)
        new = E * c
        if b is not None:
            if self.cfl_check:
                bmax = float(np.abs(_to_values(b, self.n)).max())
                ratio = h * bmax / self.grid.spacing
                self.max_cfl = max(self.max_cfl, ratio)
                if ratio > 1.0:
                    raise StabilityViolation(
                        f"dt={h:.3g} violates dt <= dx / max|b| (dx={self.grid.spacing:.3g}, "
                        f"max|b|={bmax:.3g})")
            new = new + P * self.flux(b, c)
        if forcing is not None:
            new = new + forcing
        if not np.all(np.isfinite(new)):
            raise StabilityViolation("non-finite value in the spectral state")
        new[0] = new[0].real
        new[-1] = new[-1].real
        return new


def _path_increments(profiles_c: np.ndarray, paths: Sequence[SampledPath], t0, t1, k2):
    """sum_p g_p,k * int_{t0}^{t1} exp(-(t1-s)k^2) dY^p_s."""
    out = np.zeros(k2.shape, dtype=complex)
    for g, Y in zip(profiles_c, paths):
        out += g * convolution_increment(Y, t0, t1, k2)
    return out


def _drift_coeffs(pot: Potentials, c: np.ndarray) -> np.ndarray:
    """V' + F' * rho in coefficient form."""
    return pot.dV.coeffs + TWO_PI * pot.dF.coeffs * c


# --- trajectories ----------------------------------------------------------

@dataclass
class PdeTrajectory:
    """Recorded solution: coefficient rows at the recorded times."""

    grid: TorusGrid
    times: np.ndarray
    coeffs: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return self.times.size

    def __getitem__(self, j: int) -> Field:
        return Field.from_coeffs(self.grid, self.coeffs[j])

    @property
    def final(self) -> Field:
        return self[-1]

    def values(self) -> np.ndarray:
        return np.fft.irfft(self.coeffs * self.grid.n_points, n=self.grid.n_points, axis=1)

    def masses(self) -> np.ndarray:
        return TWO_PI * self.coeffs[:, 0].real

    def l2_norms(self) -> np.ndarray:
        w = _mode_weights(self.coeffs.shape[1])
        return np.sqrt(TWO_PI * (np.abs(self.coeffs) ** 2 @ w))

    def h1_norms(self) -> np.ndarray:
        w = _mode_weights(self.coeffs.shape[1]) * (1.0 + self.grid.wavenumbers ** 2)
        return np.sqrt(TWO_PI * (np.abs(self.coeffs) ** 2 @ w))

    def pairings(self, f: Field) -> np.ndarray:
        """<f, u_t> at every recorded time, exact for the trigonometric interpolants."""
        w = _mode_weights(self.coeffs.shape[1])
        return TWO_PI * (self.coeffs @ (w * np.conj(f.coeffs))).real

    def pairing_path(self, f: Field) -> SampledPath:
        return SampledPath(self.times, self.pairings(f))

    def sup_l2_gap(self, other: "PdeTrajectory") -> float:
        """sup_t ||u_t - v_t||_{L2} over the shared recorded times."""
        if other.grid != self.grid:
            raise ValueError("trajectories live on different grids")
        common, ia, ib = np.intersect1d(np.round(self.times, 12), np.round(other.times, 12),
                                        return_indices=True)
        if common.size == 0:
            raise ValueError("trajectories share no recorded times")
        d = self.coeffs[ia] - other.coeffs[ib]
        w = _mode_weights(d.shape[1])
        return float(np.sqrt(TWO_PI * (np.abs(d) ** 2 @ w)).max())

    def to_csv(self, path) -> None:
        """One row per recorded time: t then the value at every grid node."""
        vals = self.values()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i}" for i in range(self.grid.n_points)])
            for t, row in zip(self.times, vals):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])

    def observables_to_csv(self, path, test_functions: Sequence[Field] = ()) -> None:
        vals = self.values()
        cols = [self.masses(), vals.min(axis=1), self.l2_norms(), self.h1_norms()]
        cols += [self.pairings(f) for f in test_functions]
        header = ["t", "mass", "min", "l2norm", "h1norm"]
        header += [f"pairing_f{i + 1}" for i in range(len(test_functions))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for j, t in enumerate(self.times):
                w.writerow([repr(float(t))] + [repr(float(c[j])) for c in cols])


class _Recorder:
    def __init__(self, times, every, nk):
        self.idx = list(range(0, times.size, every))
        if self.idx[-1] != times.size - 1:
            self.idx.append(times.size - 1)
        self.want = set(self.idx)
        self.times = times[self.idx]
        self.rows = np.empty((len(self.idx), nk), dtype=complex)
        self.pos = 0

    def __call__(self, j, c):
        if j in self.want:
            self.rows[self.pos] = c
            self.pos += 1


def _energy_diagnostics(grid, c_rows, times):
    w = _mode_weights(c_rows.shape[1])
    a2 = np.abs(c_rows) ** 2
    l2 = np.sqrt(TWO_PI * (a2 @ w))
    grad2 = TWO_PI * (a2 @ (w * grid.wavenumbers ** 2))
    dissipated = float(np.sum(grad2[:-1] * np.diff(times))) if times.size > 1 else 0.0
    return {"sup_l2": float(l2.max()), "int_grad_l2_sq": dissipated,
            "energy_bound": float(l2.max() + dissipated)}


# --- forced McKean-Vlasov equation ---------------------------------------

@dataclass
class PdeRun:
    """Cauchy problem for d_t rho = d_xx rho + d_x[(V' + F' * rho) rho] + forcing."""

    initial: Field
    potentials: Potentials
    forcing: Forcing
    T: float
    dt: float
    record_every: int = 1
    self_consistent: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.initial.grid != self.potentials.grid:
            raise ValueError("initial datum and potentials live on different grids")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")


def step_mkv(rho: Field, pot: Potentials, dt: float, forcing: Optional[Forcing] = None,
             t0: float = 0.0, stepper: Optional[_EtdStepper] = None) -> Field:
    """One ETD-Euler step of the forced McKean-Vlasov equation from t0 to t0 + dt."""
    st = stepper or _EtdStepper(rho.grid)
    c = np.array(rho.coeffs)
    F = None
    if forcing is not None and len(forcing):
        g = np.array([p.coeffs for p in forcing.profiles])
        F = _path_increments(g, forcing.paths, t0, t0 + dt, st.k2)
    return Field.from_coeffs(rho.grid, st.step(c, dt, _drift_coeffs(pot, c), F))


def solve_mkv(run: PdeRun) -> PdeTrajectory:
    """Solve on [0, T]; records every ``record_every`` steps plus the final time."""
    grid = run.initial.grid
    pot = run.potentials
    times = step_mesh(run.T, run.dt)
    st = _EtdStepper(grid)
    c = np.array(run.initial.coeffs)
    nk = c.size
    rec = _Recorder(times, run.record_every, nk)
    forcing = run.forcing
    g = np.array([p.coeffs for p in forcing.profiles]) if len(forcing) else None
    rec(0, c)
    for j in range(times.size - 1):
        t0, t1 = times[j], times[j + 1]
        F = _path_increments(g, forcing.paths, t0, t1, st.k2) if g is not None else None
        b = _drift_coeffs(pot, c) if run.self_consistent else pot.dV.coeffs
        c = st.step(c, t1 - t0, b, F)
        rec(j + 1, c)
    traj = PdeTrajectory(grid, rec.times, rec.rows)
    traj.diagnostics = _energy_diagnostics(grid, rec.rows, rec.times)
    traj.diagnostics["mass_residual"] = mass_identity_residual(traj, run.initial, forcing)
    traj.diagnostics["max_cfl"] = st.max_cfl
    if not math.isfinite(traj.diagnostics["energy_bound"]):
        raise StabilityViolation("a-priori energy diagnostic is not finite")
    return traj


def mass_identity_residual(traj: PdeTrajectory, initial: Field, forcing: Forcing) -> float:
    """max_t |<1, rho_t> - <1, rho_0> - sum_p <1, g_p> (Y^p_t - Y^p_0)|."""
    expected = np.full(traj.times.size, initial.integral())
    for g, Y in zip(forcing.profiles, forcing.paths):
        expected += TWO_PI * g.coeffs[0].real * (Y(traj.times) - Y(Y.t0))
    # integral() of the initial datum is the trapezoid sum, equal to 2 pi c_0 up to rounding
    return float(np.abs(traj.masses() - expected).max())


# --- linear Fokker-Planck equation and lower bounds -----------------------

def lower_bound_rate(pot: Optional[Potentials] = None, mode: str = "drift", *,
                     f: Optional[Union[Field, Sequence[Field]]] = None,
                     M: Optional[float] = None, R: Optional[float] = None) -> float:
    """Exponential rate of the positivity floor (min zeta_0) exp(-t rate).

    drift:    a(f) = sup|f|^2 / 2 + sup|f'| for the drift field(s) f.
    cutoff:   |V'|^2 + M^2 |F'|^2 + |V''| + M |F''| (sup norms).
    l2_bound: |V'|^2 + |F'|^2 R^2 + |V''| + |F''| R with R = sup_t ||rho_t||_{L2}.
    """
    if mode == "drift":
        if f is None:
            raise ValueError("the drift mode needs the drift field f")
        fields = [f] if isinstance(f, Field) else list(f)
        s = max(g.sup_norm() for g in fields)
        d = max(g.derivative().sup_norm() for g in fields)
        return 0.5 * s * s + d
    if pot is None:
        raise ValueError(f"{mode} needs the potentials")
    v1, f1 = pot.dV.sup_norm(), pot.dF.sup_norm()
    v2, f2 = pot.ddV.sup_norm(), pot.ddF.sup_norm()
    if mode == "cutoff":
        if M is None or M < 0:
            raise ValueError("the cutoff mode needs a cutoff level M >= 0")
        return v1 ** 2 + M * M * f1 ** 2 + v2 + M * f2
    if mode == "l2_bound":
        if R is None or R < 0:
            raise ValueError("the l2_bound mode needs R >= 0")
        return v1 ** 2 + f1 ** 2 * R * R + v2 + f2 * R
    raise ValueError(f"unknown lower-bound mode {mode!r}")


@dataclass(frozen=True)
class LowerBoundCertificate:
    eta: float
    rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("lower-bound rate must be nonnegative")

    def floor(self, t):
        return self.eta * np.exp(-np.asarray(t, dtype=float) * self.rate)


DriftSpec = Union[None, Field, Sequence[Field], Callable[[int, float], Field]]


def _drift_at(drift: DriftSpec, j: int, t: float) -> Optional[Field]:
    if drift is None or isinstance(drift, Field):
        return drift
    if callable(drift):
        return drift(j, t)
    return drift[j]


class _FloorMonitor:
    """Tracks min zeta_t against (min zeta_0) exp(-t a), a taken over the drifts used so far."""

    def __init__(self, zeta0: Field, check: bool, rtol: float = 1e-9):
        self.eta = float(zeta0.values.min())
        if not self.eta > 0:
            raise PositivityFloorViolation(f"initial density not strictly positive (min {self.eta:.3e})")
        self.check = check
        self.rtol = rtol
        self.rate = 0.0
        self.min_margin = math.inf

    def update_rate(self, b: Optional[Field]):
        if b is not None:
            self.rate = max(self.rate, lower_bound_rate(f=b))

    def test(self, t: float, c: np.ndarray, grid: TorusGrid):
        vals = _to_values(c, grid.n_points)
        i = int(np.argmin(vals))
        floor = self.eta * math.exp(-t * self.rate)
        margin = vals[i] - floor
        self.min_margin = min(self.min_margin, margin / floor)
        if self.check and margin < -self.rtol * floor:
            raise PositivityFloorViolation(
                f"min {vals[i]:.6e} at x={grid.nodes[i]:.4f}, t={t:.4g} is below the floor "
                f"{floor:.6e} (margin {margin:.3e}, rate {self.rate:.4g})")


def solve_linear_fp(zeta0: Field, drift: DriftSpec, dt: float, T: float, record_every: int = 1,
                    floor_check: bool = True) -> PdeTrajectory:
    """d_t zeta = d_xx zeta + d_x[b zeta] with a given drift b(t, .).

    ``drift`` is a fixed Field, a sequence with one Field per step, or a
    callable (step index, time) -> Field.  Mass is conserved exactly and the
    solution is checked against the floor (min zeta_0) exp(-t a(b)) at every step.
    """
    grid = zeta0.grid
    times = step_mesh(T, dt)
    st = _EtdStepper(grid)
    mon = _FloorMonitor(zeta0, floor_check)
    c = np.array(zeta0.coeffs)
    rec = _Recorder(times, record_every, c.size)
    rec(0, c)
    for j in range(times.size - 1):
        t0, t1 = times[j], times[j + 1]
        b = _drift_at(drift, j, t0)
        mon.update_rate(b)
        c = st.step(c, t1 - t0, None if b is None else np.asarray(b.coeffs))
        mon.test(t1, c, grid)
        rec(j + 1, c)
    traj = PdeTrajectory(grid, rec.times, rec.rows)
    traj.diagnostics = _energy_diagnostics(grid, rec.rows, rec.times)
    traj.diagnostics.update(mass_drift=float(np.abs(traj.masses() - zeta0.integral()).max()),
                            floor_rate=mon.rate, min_floor_margin=mon.min_margin,
                            eta=mon.eta)
    return traj


# --- intermediate weighted-marginal equations ----------------------------

@dataclass
class IntermediateSolution:
    rho: PdeTrajectory
    zeta: PdeTrajectory
    diagnostics: dict = field(default_factory=dict)


def _cutoff_correction(grid: TorusGrid, pot: Potentials, positions, weights, M) -> np.ndarray:
    """Coefficients of (1/N) sum_j (chi_M(A^j) - A^j) F'(. - X^j)."""
    K = pot.fp_coeffs.size
    out = np.zeros(grid.n_points // 2 + 1, dtype=complex)
    if K == 0 or math.isinf(M):
        return out
    w = np.asarray(cutoff(M, weights), dtype=float) - weights
    if not np.any(w):
        return out
    out[1:K + 1] = pot.fp_coeffs * _empirical_modes(positions, w, K)
    return out


def _gamma_raw(grid, pot, positions, weights, M) -> np.ndarray:
    K = pot.fp_coeffs.size
    out = np.zeros(grid.n_points // 2 + 1, dtype=complex)
    if K:
        w = np.asarray(cutoff(M, weights), dtype=float)
        out[1:K + 1] = pot.fp_coeffs * _empirical_modes(positions, w, K)
    return out


def solve_intermediate_rho(level: str, law: InitialLaw, pot: Potentials, forcing: Forcing,
                           T: float, dt: float, M: float = math.inf,
                           epsilon: Optional[MollifierParam] = None, n_ref: int = 10_000,
                           streams: Optional[RngStreams] = None, record_every: int = 1,
                           control_variate: bool = True) -> IntermediateSolution:
    """Weighted marginal at the (eps, M, kappa) or (M, kappa) level.

    Both levels solve the pair

        d_t zeta = d_xx zeta + d_x[(V' + Gamma_M) zeta]
        d_t rho  = d_xx rho  + d_x[(V' + Gamma_M) rho] + sum_p h_p dY^p

    with h_p = g_p zeta / (Phi_eps * zeta) at level "eps_M_kappa" and h_p = g_p
    at level "M_kappa".  Gamma_M = int chi_M(a) F'(x - y) mu(dy da) needs the
    joint law, which is represented by a mean-field ensemble of ``n_ref``
    pairs whose weights use the PDE denominator.  With ``control_variate``
    the ensemble only supplies the cutoff correction on top of the exact
    F' * rho; the correction vanishes while every weight stays in [-M, M].
    ``forcing`` must already hold the kappa-approximated paths.
    """
    if level not in ("eps_M_kappa", "M_kappa"):
        raise ValueError(f"unknown level {level!r}")
    if level == "eps_M_kappa":
        if epsilon is None:
            raise ValueError("the eps_M_kappa level needs a mollifier parameter")
        if not isinstance(epsilon, MollifierParam):
            epsilon = MollifierParam(float(epsilon))
    grid = pot.grid
    times = step_mesh(T, dt)
    st = _EtdStepper(grid)
    mon = _FloorMonitor(law.zeta0, True)
    cz = np.array(law.zeta0.coeffs)
    cr = np.array(law.rho0.coeffs)
    nk = cz.size
    rec_z = _Recorder(times, record_every, nk)
    rec_r = _Recorder(times, record_every, nk)
    rec_z(0, cz)
    rec_r(0, cr)

    use_ensemble = not math.isinf(M)
    ens = beta = None
    if use_ensemble:
        streams = streams or RngStreams(0)
        ref = streams.with_replication(REFERENCE_REPLICATION + streams.replication)
        ens = init_ensemble(law, n_ref, ref, epsilon or 1.0, M)
        beta = BetaSource(ref, n_ref)
    profiles = list(forcing.profiles)
    g = np.array([p.coeffs for p in profiles]) if profiles else None
    max_corr = 0.0
    min_den = math.inf
    workspace: dict = {}
    # <1, rho_t> predicted from the forcing actually applied, one entry per step
    mass_pred = [TWO_PI * cr[0].real]

    for j in range(times.size - 1):
        t0, t1 = times[j], times[j + 1]
        h = t1 - t0
        zeta = Field.from_coeffs(grid, cz)
        if use_ensemble:
            if control_variate:
                corr = _cutoff_correction(grid, pot, ens.positions, ens.weights, M)
                gamma = TWO_PI * pot.dF.coeffs * cr + corr
                max_corr = max(max_corr, float(np.abs(corr).max()))
            else:
                gamma = _gamma_raw(grid, pot, ens.positions, ens.weights, M)
        else:
            gamma = TWO_PI * pot.dF.coeffs * cr
        b = pot.dV.coeffs + gamma
        bf = Field.from_coeffs(grid, b)
        mon.update_rate(bf)

        den = None
        F = None
        if g is not None:
            den = mollify(zeta, epsilon) if level == "eps_M_kappa" else zeta
            dmin = float(den.values.min())
            min_den = min(min_den, dmin)
            if not dmin > 0:
                raise PositivityFloorViolation(f"denominator not positive at t={t0:.4g}: {dmin:.3e}")
            if level == "eps_M_kappa":
                mult = (zeta.values / den.values)
                hp = np.array([_to_coeffs(p.values * mult) for p in profiles])
            else:
                hp = g
            F = _path_increments(hp, forcing.paths, t0, t1, st.k2)
            mass_pred.append(mass_pred[-1] + TWO_PI * float(hp[:, 0].real @ forcing.increments(t0, t1)))
        else:
            mass_pred.append(mass_pred[-1])

        if use_ensemble:
            dY = forcing.increments(t0, t1) if g is not None else np.zeros(0)
            ens = step_with_fields(ens, bf, den, profiles, h, dY, beta.next(h), workspace)

        cz = st.step(cz, h, b)
        cr = st.step(cr, h, b, F)
        mon.test(t1, cz, grid)
        rec_z(j + 1, cz)
        rec_r(j + 1, cr)

    zt = PdeTrajectory(grid, rec_z.times, rec_z.rows)
    rt = PdeTrajectory(grid, rec_r.times, rec_r.rows)
    zt.diagnostics = _energy_diagnostics(grid, rec_z.rows, rec_z.times)
    zt.diagnostics["mass_drift"] = float(np.abs(zt.masses() - law.zeta0.integral()).max())
    rt.diagnostics = _energy_diagnostics(grid, rec_r.rows, rec_r.times)
    pred = np.array(mass_pred)[rec_r.idx]
    rt.diagnostics["mass_residual"] = float(np.abs(rt.masses() - pred).max())
    if level == "M_kappa":
        rt.diagnostics["mass_residual"] = max(rt.diagnostics["mass_residual"],
                                              mass_identity_residual(rt, law.rho0, forcing))
    diag = {"level": level, "M": M, "n_ref": n_ref if use_ensemble else 0,
            "max_cutoff_correction": max_corr, "min_denominator": min_den,
            "floor_rate": mon.rate, "min_floor_margin": mon.min_margin,
            "zeta_sup_h2": max(sobolev_norm(zt[j], 2) for j in range(len(zt)))}
    return IntermediateSolution(rt, zt, diag)
