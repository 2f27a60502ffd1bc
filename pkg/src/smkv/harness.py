"""Experiment configuration, convergence sweeps and run manifests.

A configuration is an INI file with the sections [grid] [time] [potentials]
[initial] [noise] [sweep] [output].  Every random draw is keyed by the master
seed, the replication index and a named substream, so the outputs depend
only on (configuration, seed).
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
import platform
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from smkv import kernels
from smkv.metrics import sup_pairing_gap
from smkv.particles import (InitialLaw, Potentials, TestFunction, init_ensemble,
                            simulate_particles)
from smkv.paths import (Forcing, NoiseSpec, RngStreams, SampledPath, brownian_family,
                        sample_brownian)
from smkv.pde import (PdeRun, PdeTrajectory, solve_intermediate_rho, solve_mkv)
from smkv.torus import TWO_PI, Field, MollifierParam, TorusGrid, basis_eval, basis_field

__version__ = "0.1.0"

AXES = ("N", "eps", "M", "kappa", "m")
LADDER_AXES = ("eps", "M", "kappa", "m")
SECTIONS = ("grid", "time", "potentials", "initial", "noise", "sweep", "output")

DEFAULT_CONFIG = """\
[grid]
n = 256

[time]
T = 1.0
dt = 2.5e-4

[potentials]
V = cos(1)
F = cos(1)
q = 0.5641895835477563*sin(1)

[initial]
zeta0 = uniform
weights = normal 1.0 0.25

[noise]
mode = single
path = fixed

[sweep]
axis = N
values = 250, 1000, 4000
N = 1000
eps = 0.2
M = 10
kappa = 64
replications = 16
n_ref = 10000
method = auto

[output]
test_functions = e-1, e1, one
seed = 20240611
record_every = 1
"""


class ConfigError(ValueError):
    """The configuration is malformed or violates a model constraint."""


# --- small parsers ---------------------------------------------------------

_TERM = re.compile(r"^\s*([+-]?\s*[0-9.eE+-]*)\s*\*?\s*(cos|sin)\s*\(\s*(\d+)\s*\)\s*$")


def parse_trig(expr: str):
    """Parse 'a*cos(k) + b*sin(j) + c' into a callable on the torus.

    The argument of cos/sin is the integer frequency k, meaning cos(k x).
    """
    expr = expr.strip()
    if expr in ("0", "zero", ""):
        return lambda x: np.zeros_like(np.asarray(x, dtype=float))
    terms = re.split(r"(?<=[\d)])\s*(?=[+-])", expr)
    parts = []
    for t in terms:
        m = _TERM.match(t)
        if m:
            coef = m.group(1).replace(" ", "")
            c = 1.0 if coef in ("", "+") else -1.0 if coef == "-" else float(coef)
            parts.append((c, m.group(2), int(m.group(3))))
            continue
        try:
            parts.append((float(t.replace(" ", "")), "const", 0))
        except ValueError:
            raise ConfigError(f"cannot parse term {t!r} in {expr!r}") from None

    def f(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for c, kind, k in parts:
            if kind == "cos":
                out = out + c * np.cos(k * x)
            elif kind == "sin":
                out = out + c * np.sin(k * x)
            else:
                out = out + c
        return out

    return f


def parse_test_function(name: str) -> Tuple[TestFunction, object]:
    """'one', 'e<z>', 'cos<k>' or 'sin<k>'; returns (particle test fn, callable)."""
    name = name.strip()
    if name == "one":
        fn = lambda x: np.ones_like(np.asarray(x, dtype=float))
    elif re.fullmatch(r"e-?\d+", name):
        z = int(name[1:])
        fn = lambda x, z=z: np.broadcast_to(basis_eval(z, x), np.shape(x)).astype(float)
    elif re.fullmatch(r"(cos|sin)\d+", name):
        k = int(name[3:])
        fn = (lambda x, k=k: np.cos(k * np.asarray(x))) if name.startswith("cos") else \
             (lambda x, k=k: np.sin(k * np.asarray(x)))
    else:
        raise ConfigError(f"unknown test function {name!r}")
    return TestFunction(name, fn), fn


def _floats(text: str) -> List[float]:
    text = text.strip().strip("[]")
    return [float(v) for v in re.split(r"[,\s]+", text) if v]


def _axis_value(axis: str, v: float):
    if axis in ("N", "kappa", "m"):
        if v != int(v) or v < 1:
            raise ConfigError(f"{axis} values must be positive integers, got {v}")
        return int(v)
    return v


# --- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    n: int
    T: float
    dt: float
    V: str
    F: str
    q: str
    zeta0: str
    weights: tuple
    noise_mode: str
    noise: Optional[NoiseSpec]
    path_mode: str
    axes: Dict[str, tuple]
    fixed: Dict[str, float]
    replications: int
    ladder_replications: int
    n_ref: int
    method: str
    literal_cutoff: bool
    test_functions: tuple
    seed: int
    record_every: int
    text: str = field(repr=False, default="")
    joint_eps: tuple = ()

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cp = _parser(self.text)
        cp["output"]["seed"] = str(int(seed))
        return load_config_text(_canonical(cp))


def _parser(text: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string(DEFAULT_CONFIG)
    user = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    user.optionxform = str
    try:
        user.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    for sec in user.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]; expected one of {', '.join(SECTIONS)}")
        for k, v in user[sec].items():
            cp[sec][k] = v
    # a user-supplied lambda replaces the decay form and vice versa
    if user.has_section("noise"):
        for k in ("lambda", "lambda_decay"):
            if k not in user["noise"] and k in cp["noise"]:
                other = "lambda_decay" if k == "lambda" else "lambda"
                if other in user["noise"]:
                    cp.remove_option("noise", k)
    return cp


def _canonical(cp: configparser.ConfigParser) -> str:
    out = io.StringIO()
    for sec in SECTIONS:
        out.write(f"[{sec}]\n")
        for k in sorted(cp[sec]):
            out.write(f"{k} = {' '.join(cp[sec][k].split())}\n")
        out.write("\n")
    return out.getvalue()


def load_config_text(text: str) -> ExperimentConfig:
    cp = _parser(text)
    canon = _canonical(cp)
    g, tm, pot, ini, noi, sw, outp = (cp[s] for s in SECTIONS)
    try:
        n = g.getint("n")
        T = tm.getfloat("T")
        dt = tm.getfloat("dt")
        replications = sw.getint("replications")
        ladder_reps = sw.getint("ladder_replications", fallback=1)
        n_ref = sw.getint("n_ref")
        seed = outp.getint("seed")
        record_every = outp.getint("record_every")
    except ValueError as exc:
        raise ConfigError(f"bad numeric value: {exc}") from None

    if n < 8 or n % 2:
        raise ConfigError(f"grid size n must be even and >= 8, got {n}")
    if not (T > 0 and dt > 0 and dt <= T):
        raise ConfigError(f"need 0 < dt <= T, got T={T}, dt={dt}")
    if replications < 1 or ladder_reps < 1 or n_ref < 1 or record_every < 1:
        raise ConfigError("replications, ladder_replications, n_ref and record_every must be >= 1")
    if not 0 <= seed < 2 ** 64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    for k in ("V", "F", "q"):
        parse_trig(pot[k])

    w = ini["weights"].split()
    if w[0] == "dirac" and len(w) == 2:
        weights = ("dirac", float(w[1]))
    elif w[0] == "normal" and len(w) == 3 and float(w[2]) >= 0:
        weights = ("normal", float(w[1]), float(w[2]))
    else:
        raise ConfigError(f"weights must be 'dirac a' or 'normal mean variance', got {ini['weights']!r}")

    mode = noi.get("mode")
    spec = None
    if mode == "modes":
        try:
            if "lambda" in noi:
                spec = NoiseSpec.from_list(_floats(noi["lambda"]))
            elif "lambda_decay" in noi:
                c, p, m = _floats(noi["lambda_decay"])
                spec = NoiseSpec.from_decay(c, p, int(m))
            else:
                raise ConfigError("modal noise needs 'lambda' or 'lambda_decay = c, p, m'")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad noise eigenvalues: {exc}") from None
        if spec.m_max >= n // 2:
            raise ConfigError(f"noise modes up to {spec.m_max} exceed the grid resolution n={n}")
    elif mode != "single":
        raise ConfigError(f"noise mode must be 'single' or 'modes', got {mode!r}")
    path_mode = noi.get("path")
    if path_mode not in ("fixed", "replication"):
        raise ConfigError(f"noise path must be 'fixed' or 'replication', got {path_mode!r}")

    axis_names = [a.strip() for a in sw["axis"].split(",") if a.strip()]
    axes = {}
    for a in axis_names:
        if a not in AXES:
            raise ConfigError(f"unknown sweep axis {a!r}; expected one of {AXES}")
        key = f"{a}_values" if f"{a}_values" in sw else "values"
        if key == "values" and len(axis_names) > 1:
            raise ConfigError(f"several axes are swept; give '{a}_values'")
        vals = tuple(_axis_value(a, v) for v in _floats(sw[key]))
        if not vals:
            raise ConfigError(f"axis {a} has no values")
        axes[a] = vals
    if "m" in axes and mode != "modes":
        raise ConfigError("an m-sweep needs modal noise (mode = modes)")

    fixed = {}
    for a in ("N", "eps", "M", "kappa", "m"):
        if a in sw:
            v = sw[a].strip()
            fixed[a] = math.inf if v == "inf" else _axis_value(a, float(v)) if a != "M" else float(v)
    if fixed.get("eps", 1) <= 0:
        raise ConfigError("eps must be positive")
    for v in axes.get("eps", ()):
        if v <= 0:
            raise ConfigError("eps values must be positive")
    for v in axes.get("M", ()) + (fixed.get("M", 1),):
        if v <= 0:
            raise ConfigError("M values must be positive")

    joint_eps = ()
    if "joint_eps" in sw:
        # exploratory: eps shrinks together with N, one eps per N value
        joint_eps = tuple(_floats(sw["joint_eps"]))
        if "N" not in axes or len(joint_eps) != len(axes["N"]):
            raise ConfigError("joint_eps needs an N axis with one eps per N value")
        if any(v <= 0 for v in joint_eps):
            raise ConfigError("joint_eps values must be positive")

    method = sw.get("method")
    if method not in ("auto", "direct", "spectral"):
        raise ConfigError(f"method must be auto, direct or spectral, got {method!r}")

    tfs = tuple(t.strip() for t in outp["test_functions"].split(",") if t.strip())
    if not tfs:
        raise ConfigError("at least one test function is required")
    for t in tfs:
        parse_test_function(t)

    cfg = ExperimentConfig(
        n=n, T=T, dt=dt, V=pot["V"], F=pot["F"], q=pot["q"], zeta0=ini["zeta0"].strip(),
        weights=weights, noise_mode=mode, noise=spec, path_mode=path_mode, axes=axes,
        fixed=fixed, replications=replications, ladder_replications=ladder_reps, n_ref=n_ref,
        method=method, literal_cutoff=sw.getboolean("literal_cutoff", fallback=False),
        test_functions=tfs, seed=seed, record_every=record_every, text=canon, joint_eps=joint_eps)
    Experiment(cfg)  # builds fields and the initial law, raising on invalid data
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read a configuration file, or the configuration stored in a manifest."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if text.lstrip().startswith("{"):
        head = json.loads(text.splitlines()[0])
        if "config_text" not in head:
            raise ConfigError(f"{path} is a manifest without an embedded configuration")
        return load_config_text(head["config_text"]).with_seed(head["seed"])
    return load_config_text(text)


def default_config() -> ExperimentConfig:
    return load_config_text(DEFAULT_CONFIG)


# --- wiring ----------------------------------------------------------------

def _zeta0(grid: TorusGrid, spec: str) -> Field:
    parts = spec.split()
    if parts[0] == "uniform":
        return grid.constant(1.0 / TWO_PI)
    if parts[0] == "cos" and len(parts) == 3:
        a, k = float(parts[1]), int(parts[2])
        return grid.field(lambda x: (1.0 + a * np.cos(k * x)) / TWO_PI)
    if parts[0] == "vonmises" and len(parts) == 3:
        kappa, mu = float(parts[1]), float(parts[2])
        f = grid.field(lambda x: np.exp(kappa * (np.cos(x - mu) - 1.0)))
        return f * (1.0 / f.integral())
    raise ConfigError(f"zeta0 must be 'uniform', 'cos a k' or 'vonmises kappa mu', got {spec!r}")


class Experiment:
    """Fields, laws and driving paths built from a configuration."""

    def __init__(self, cfg: ExperimentConfig, threads: int = 1):
        self.cfg = cfg
        self.threads = max(1, int(threads))
        self.grid = TorusGrid(cfg.n)
        g = self.grid
        self.pot = Potentials.from_functions(g, parse_trig(cfg.V), parse_trig(cfg.F), parse_trig(cfg.q))
        try:
            self.law = InitialLaw(_zeta0(g, cfg.zeta0), cfg.weights)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.tests = [parse_test_function(t) for t in cfg.test_functions]
        self.test_fields = {t.name: g.field(fn) for t, fn in self.tests}

    def streams(self, r: int) -> RngStreams:
        return RngStreams(self.cfg.seed, r)

    def _path_replication(self, r: int) -> int:
        return 0 if self.cfg.path_mode == "fixed" else r

    def forcing(self, r: int, kappa: Optional[int] = None, m: Optional[int] = None) -> Forcing:
        """Forcing of replication r, kappa-approximated and mode-truncated as requested."""
        cfg = self.cfg
        st = self.streams(self._path_replication(r))
        if cfg.noise_mode == "single":
            Y = sample_brownian(cfg.T, cfg.dt, st.substream("noise", 0))
            f = Forcing.single(self.pot.q, Y)
        else:
            paths = brownian_family(cfg.noise, cfg.T, cfg.dt, st)
            f = Forcing.from_noise(self.grid, cfg.noise, paths, m)
        return f.approximated(kappa)

    def fixed(self, axis: str):
        """Most converged value of an axis: the extreme of its sweep, else its fixed value."""
        vals = self.cfg.axes.get(axis)
        if vals:
            return min(vals) if axis == "eps" else max(vals)
        if axis in self.cfg.fixed:
            return self.cfg.fixed[axis]
        if axis == "m":
            return None
        raise ConfigError(f"no value for {axis}")

    # PDE levels
    def target(self, r: int, m: Optional[int] = None) -> PdeTrajectory:
        return self._mkv(self.forcing(r, None, m))

    def rho_kappa(self, r: int, kappa: int, m: Optional[int] = None) -> PdeTrajectory:
        return self._mkv(self.forcing(r, kappa, m))

    def _mkv(self, forcing: Forcing) -> PdeTrajectory:
        cfg = self.cfg
        return solve_mkv(PdeRun(self.law.rho0, self.pot, forcing, cfg.T, cfg.dt, cfg.record_every))

    def rho_M(self, r: int, M: float, kappa: int, m: Optional[int] = None) -> PdeTrajectory:
        cfg = self.cfg
        sol = solve_intermediate_rho("M_kappa", self.law, self.pot, self.forcing(r, kappa, m),
                                     cfg.T, cfg.dt, M=M, n_ref=cfg.n_ref, streams=self.streams(r),
                                     record_every=cfg.record_every)
        sol.rho.diagnostics.update(sol.diagnostics)
        return sol.rho

    def rho_eps(self, r: int, eps: float, M: float, kappa: int, m: Optional[int] = None) -> PdeTrajectory:
        cfg = self.cfg
        sol = solve_intermediate_rho("eps_M_kappa", self.law, self.pot, self.forcing(r, kappa, m),
                                     cfg.T, cfg.dt, M=M, epsilon=MollifierParam(eps),
                                     n_ref=cfg.n_ref, streams=self.streams(r),
                                     record_every=cfg.record_every)
        sol.rho.diagnostics.update(sol.diagnostics)
        return sol.rho

    # particles
    def particle_run(self, r: int, N: int, eps: float, M: float, kappa: int, m: Optional[int] = None):
        cfg = self.cfg
        st = self.streams(r)
        e0 = init_ensemble(self.law, N, st, eps, M, kappa, m)
        forcing = self.forcing(r, kappa, m)
        return simulate_particles(e0, self.pot, forcing, cfg.T, cfg.dt, st,
                                  test_functions=[t for t, _ in self.tests], method=cfg.method,
                                  literal_cutoff=cfg.literal_cutoff, nthreads=self.threads)

    def pairing_paths(self, traj: PdeTrajectory) -> Dict[str, SampledPath]:
        return {name: traj.pairing_path(f) for name, f in self.test_fields.items()}

    def map(self, fn, items):
        """Ordered parallel map over replications."""
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))


# --- gap tables ------------------------------------------------------------

@dataclass
class GapRow:
    axis: str
    axis_value: object
    test_fn: str
    mean_gap: float
    stderr: float
    replications: int


@dataclass
class RunRecord:
    label: str
    kind: str
    replication: int
    params: dict
    diagnostics: dict


@dataclass
class GapTable:
    rows: List[GapRow] = field(default_factory=list)
    runs: List[RunRecord] = field(default_factory=list)
    observables: Dict[str, PdeTrajectory] = field(default_factory=dict)

    def add(self, axis: str, value, gaps: List[Dict[str, float]], order: Sequence[str]):
        R = len(gaps)
        for name in order:
            v = np.array([g[name] for g in gaps])
            se = float(v.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0
            self.rows.append(GapRow(axis, value, name, float(v.mean()), se, R))

    def select(self, axis: str, test_fn: str) -> List[GapRow]:
        return [r for r in self.rows if r.axis == axis and r.test_fn == test_fn]

    def extend(self, other: "GapTable"):
        self.rows += other.rows
        self.runs += other.runs
        self.observables.update(other.observables)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["axis", "axis_value", "test_fn", "mean_gap", "stderr", "replications"])
            for r in self.rows:
                w.writerow([r.axis, _fmt(r.axis_value), r.test_fn, repr(r.mean_gap),
                            repr(r.stderr), r.replications])


def _fmt(v) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return repr(v) if isinstance(v, float) else str(v)


def _traj_gaps(exp: Experiment, a: PdeTrajectory, b: PdeTrajectory) -> Dict[str, float]:
    gaps = sup_pairing_gap(exp.pairing_paths(a), exp.pairing_paths(b))
    gaps["L2"] = a.sup_l2_gap(b)
    return gaps


def _clean(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        if isinstance(v, float) and not math.isfinite(v):
            v = repr(v)
        out[k] = v
    return out


def run_n_sweep(cfg: ExperimentConfig, threads: int = 1) -> GapTable:
    """Particle pairings against the (eps, M, kappa) weighted marginal, per N."""
    exp = Experiment(cfg, threads)
    if "N" not in cfg.axes:
        raise ConfigError("run_n_sweep needs an N axis")
    eps, M, kappa = exp.fixed("eps"), exp.fixed("M"), exp.fixed("kappa")
    m = cfg.fixed.get("m")
    R = cfg.replications
    table = GapTable()

    ref_reps = [0] if cfg.path_mode == "fixed" else list(range(R))
    refs = dict(zip(ref_reps, exp.map(lambda r: exp.rho_eps(r, eps, M, kappa, m), ref_reps)))
    for r, tr in refs.items():
        table.runs.append(RunRecord(f"rho_eps_M_kappa_r{r}", "pde", r,
                                    {"eps": eps, "M": M, "kappa": kappa}, _clean(tr.diagnostics)))
    table.observables["reference"] = refs[ref_reps[0]]
    ref_paths = {r: exp.pairing_paths(tr) for r, tr in refs.items()}
    names = list(cfg.test_functions)

    for N in cfg.axes["N"]:
        def one(r, N=N):
            run = exp.particle_run(r, N, eps, M, kappa, m)
            paths = {k: SampledPath(run.times, v) for k, v in run.observables.items()}
            ref = ref_paths[r if cfg.path_mode == "replication" else 0]
            return sup_pairing_gap(paths, ref), run.diagnostics

        res = exp.map(one, range(R))
        table.add("N", N, [g for g, _ in res], names)
        for r, (_, d) in enumerate(res):
            table.runs.append(RunRecord(f"particles_N{N}_r{r}", "particles", r,
                                        {"N": N, "eps": eps, "M": M, "kappa": kappa}, _clean(d)))
    return table


def run_joint_sweep(cfg: ExperimentConfig, threads: int = 1) -> GapTable:
    """Exploratory joint scaling: particles at (N, eps_N) against the eps -> 0 marginal.

    The reference is rho^{M,kappa} (rho^kappa when M is infinite).  No
    convergence rate is asserted for this mode.
    """
    exp = Experiment(cfg, threads)
    if not cfg.joint_eps:
        raise ConfigError("run_joint_sweep needs joint_eps")
    M, kappa = exp.fixed("M"), exp.fixed("kappa")
    m = cfg.fixed.get("m")
    R = cfg.replications
    table = GapTable()
    ref_reps = [0] if cfg.path_mode == "fixed" else list(range(R))

    def ref(r):
        return exp.rho_kappa(r, kappa, m) if math.isinf(M) else exp.rho_M(r, M, kappa, m)

    refs = dict(zip(ref_reps, exp.map(ref, ref_reps)))
    for r, tr in refs.items():
        table.runs.append(RunRecord(f"rho_M_kappa_r{r}", "pde", r, {"M": M, "kappa": kappa},
                                    _clean(tr.diagnostics)))
    ref_paths = {r: exp.pairing_paths(tr) for r, tr in refs.items()}
    for N, eps in zip(cfg.axes["N"], cfg.joint_eps):
        def one(r, N=N, eps=eps):
            run = exp.particle_run(r, N, eps, M, kappa, m)
            paths = {k: SampledPath(run.times, v) for k, v in run.observables.items()}
            return sup_pairing_gap(paths, ref_paths[r if cfg.path_mode == "replication" else 0])

        table.add("joint_N", N, exp.map(one, range(R)), list(cfg.test_functions))
    return table


def run_limit_ladder(cfg: ExperimentConfig, threads: int = 1) -> GapTable:
    """Gap tables for every configured ladder axis plus the overall gaps to the target.

    eps:   rho^{eps,M,kappa} against rho^{M,kappa}
    M:     rho^{M,kappa}     against rho^{kappa}
    kappa: rho^{kappa}       against rho
    m:     rho^{m}           against rho^{infinity} (all configured modes)
    """
    exp = Experiment(cfg, threads)
    table = GapTable()
    if "N" in cfg.axes:
        table.extend(run_joint_sweep(cfg, threads) if cfg.joint_eps else run_n_sweep(cfg, threads))
    axes = [a for a in LADDER_AXES if a in cfg.axes]
    if not axes:
        return table
    names = list(cfg.test_functions) + ["L2"]
    M_fix, kappa_fix, eps_fix = exp.fixed("M"), exp.fixed("kappa"), exp.fixed("eps")
    m_fix = cfg.fixed.get("m")
    reps = list(range(cfg.ladder_replications))
    pending: Dict[tuple, List[Dict[str, float]]] = {}

    def record(label, r, params, tr):
        table.runs.append(RunRecord(label, "pde", r, params, _clean(tr.diagnostics)))

    for r in reps:
        target = exp.target(r, m_fix)
        record(f"rho_r{r}", r, {"m": m_fix}, target)
        if r == 0:
            table.observables["rho"] = target
        cache: Dict[tuple, PdeTrajectory] = {}

        def rho_k(k):
            if ("k", k) not in cache:
                cache[("k", k)] = tr = exp.rho_kappa(r, k, m_fix)
                record(f"rho_kappa{k}_r{r}", r, {"kappa": k, "m": m_fix}, tr)
            return cache[("k", k)]

        def rho_Mk(M, k):
            if math.isinf(M):
                return rho_k(k)
            if ("M", M, k) not in cache:
                cache[("M", M, k)] = tr = exp.rho_M(r, M, k, m_fix)
                record(f"rho_M{_fmt(M)}_kappa{k}_r{r}", r, {"M": M, "kappa": k}, tr)
            return cache[("M", M, k)]

        jobs = []
        if "eps" in axes:
            jobs += [("eps", e, lambda e=e: exp.rho_eps(r, e, M_fix, kappa_fix, m_fix),
                      lambda: rho_Mk(M_fix, kappa_fix)) for e in cfg.axes["eps"]]
        if "M" in axes:
            jobs += [("M", M, lambda M=M: rho_Mk(M, kappa_fix), lambda: rho_k(kappa_fix))
                     for M in cfg.axes["M"]]
        if "kappa" in axes:
            jobs += [("kappa", k, lambda k=k: rho_k(k), lambda: target) for k in cfg.axes["kappa"]]
        if "m" in axes:
            full = exp.target(r, None) if m_fix is not None else target
            jobs += [("m", mm, lambda mm=mm: exp.target(r, mm), lambda: full) for mm in cfg.axes["m"]]

        for axis, value, make, make_next in jobs:
            tr = make()
            if axis in ("eps", "m"):
                record(f"rho_{axis}{_fmt(value)}_r{r}", r, {axis: value}, tr)
            pending.setdefault((axis, value), []).append(_traj_gaps(exp, tr, make_next()))
            if axis != "m":
                pending.setdefault((f"overall_{axis}", value), []).append(_traj_gaps(exp, tr, target))
    for (axis, value), gaps in pending.items():
        table.add(axis, value, gaps, names)
    return table


# --- manifests -------------------------------------------------------------

def versions() -> dict:
    import scipy

    return {"smkv": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "kernel_backend": kernels.BACKEND}


def emit_manifest(path, cfg: ExperimentConfig, table: GapTable, command: str,
                  wall_seconds: float) -> None:
    """Line-delimited JSON: one header record, then one record per run."""
    path = Path(path)
    head = {"record": "header", "command": command, "config_hash": cfg.config_hash,
            "seed": cfg.seed, "versions": versions(), "config_text": cfg.text,
            "wall_seconds": round(wall_seconds, 3)}
    try:
        with open(path, "w") as fh:
            fh.write(json.dumps(head, sort_keys=True) + "\n")
            for run in table.runs:
                fh.write(json.dumps({"record": "run", "label": run.label, "kind": run.kind,
                                     "replication": run.replication, "params": _clean(run.params),
                                     "diagnostics": run.diagnostics}, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_outputs(out_dir, cfg: ExperimentConfig, table: GapTable, command: str,
                  wall_seconds: float, run_name: Optional[str] = None) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_name = run_name or f"{command}_{cfg.config_hash[:12]}"
    paths = {"gaps": out / "gaps.csv", "manifest": out / f"manifest_{run_name}.txt"}
    table.to_csv(paths["gaps"])
    exp_fields = [Experiment(cfg).test_fields[t] for t in cfg.test_functions]
    for label, tr in table.observables.items():
        p = out / f"observables_{run_name}_{label}.csv"
        tr.observables_to_csv(p, exp_fields)
        paths[f"observables_{label}"] = p
    emit_manifest(paths["manifest"], cfg, table, command, wall_seconds)
    return paths


def simulate(cfg: ExperimentConfig, threads: int = 1, replication: int = 0):
    """Single particle run at the fixed parameters; returns (run, table with its record)."""
    exp = Experiment(cfg, threads)
    N = int(exp.fixed("N"))
    eps, M, kappa = exp.fixed("eps"), exp.fixed("M"), exp.fixed("kappa")
    run = exp.particle_run(replication, N, eps, M, kappa, cfg.fixed.get("m"))
    table = GapTable()
    table.runs.append(RunRecord(f"particles_N{N}_r{replication}", "particles", replication,
                                {"N": N, "eps": eps, "M": M, "kappa": kappa}, _clean(run.diagnostics)))
    return run, table


def write_particle_observables(path, run, names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + list(names))
        for j, t in enumerate(run.times):
            w.writerow([repr(float(t))] + [repr(float(run.observables[n][j])) for n in names])
