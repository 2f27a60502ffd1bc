import math

import numpy as np
import pytest
from scipy.integrate import quad

from smkv import kernels
from smkv.paths import Forcing, RngStreams, SampledPath, linear_path, sample_brownian
from smkv.particles import (ONE, BetaSource, InitialLaw, LowerBoundViolation, ParticleEnsemble,
                            Potentials, TestFunction, basis_test_function, em_step, gamma_m,
                            init_ensemble, interaction_drift, mean_field_ensemble_step,
                            mollified_density, pair_terms, simulate_particles,
                            step_with_fields, uniform_law,
                            weight_drift_coeffs, weighted_pairing_trajectory)
from smkv.pde import solve_intermediate_rho
from smkv.metrics import torus_distance
from smkv.torus import TWO_PI, MollifierParam, TorusGrid, convolve, mollifier_eval, mollify


GRID = TorusGrid(64)


def pots(V=None, F=None, q=None):
    zero = lambda x: np.zeros_like(x)
    return Potentials.from_functions(GRID, V or zero, F or zero, q or zero)


def standard_pots():
    return pots(V=np.cos, F=lambda x: np.cos(x) + 0.3 * np.sin(2 * x),
                q=lambda x: 0.5 + 0.4 * np.sin(x))


def random_ensemble(N, seed, eps=0.2, M=math.inf):
    rng = np.random.default_rng(seed)
    return ParticleEnsemble(rng.uniform(0, TWO_PI, N), rng.normal(1.0, 0.5, N), eps, M)


# initial law and ensemble

def test_initial_law_validation():
    with pytest.raises(ValueError):
        InitialLaw(GRID.field(lambda x: (1 + np.cos(x)) / TWO_PI))
    with pytest.raises(ValueError):
        InitialLaw(GRID.constant(1.0))
    law = InitialLaw(GRID.field(lambda x: (1 + 0.5 * np.cos(x)) / TWO_PI))
    assert law.eta == pytest.approx(0.5 / TWO_PI)


def test_init_dirac_weights():
    e = init_ensemble(uniform_law(GRID, ("dirac", 1.0)), 4, RngStreams(1))
    assert np.array_equal(e.weights, np.ones(4))
    with pytest.raises(ValueError):
        init_ensemble(uniform_law(GRID), 0, RngStreams(1))


def test_init_mean_weight():
    N = 100_000
    e = init_ensemble(uniform_law(GRID, ("normal", 1.0, 0.1)), N, RngStreams(2))
    assert abs(e.weights.mean() - 1.0) <= 4 * math.sqrt(0.1 / N)


def test_init_deterministic():
    law = uniform_law(GRID)
    a = init_ensemble(law, 50, RngStreams(3))
    b = init_ensemble(law, 50, RngStreams(3))
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.weights, b.weights)


def test_init_marginals_converge():
    z = GRID.field(lambda x: (1 + 0.6 * np.cos(x)) / TWO_PI)
    law = InitialLaw(z, ("normal", 2.0, 0.25))
    N = 100_000
    e = init_ensemble(law, N, RngStreams(4))
    # <cos, zeta0> = 0.3 and <cos, rho0> = 0.6
    assert abs(np.cos(e.positions).mean() - 0.3) <= 4 / math.sqrt(N)
    assert abs((e.weights * np.cos(e.positions)).mean() - 0.6) <= 8 / math.sqrt(N)


def test_ensemble_invariants():
    e = ParticleEnsemble(np.array([-0.5, 7.0, TWO_PI]), np.ones(3), 0.3)
    assert np.all((e.positions >= 0) & (e.positions < TWO_PI))
    assert isinstance(e.epsilon, MollifierParam)
    with pytest.raises(ValueError):
        ParticleEnsemble(np.array([0.0]), np.array([np.nan]), 1.0)
    with pytest.raises(ValueError):
        ParticleEnsemble(np.array([]), np.array([]), 1.0)


# interaction drift

def test_drift_without_interaction():
    p = pots(V=np.cos)
    e = random_ensemble(5, 0)
    for i in range(5):
        assert interaction_drift(i, e, p) == pytest.approx(math.sin(e.positions[i]), abs=1e-12)


def test_drift_two_particles():
    # F = -cos gives F' = sin
    p = pots(F=lambda x: -np.cos(x))
    e = ParticleEnsemble(np.array([0.0, math.pi / 2]), np.ones(2), 1.0, M=1e6)
    assert interaction_drift(0, e, p) == pytest.approx(0.5, abs=1e-12)


def test_cutoff_kills_interaction():
    p = pots(V=np.cos, F=np.cos)
    M = 2.0
    rng = np.random.default_rng(1)
    e = ParticleEnsemble(rng.uniform(0, TWO_PI, 6), np.full(6, 3 * M), 1.0, M)
    for i in range(6):
        assert interaction_drift(i, e, p) == pytest.approx(math.sin(e.positions[i]), abs=1e-12)


def test_literal_cutoff_variant_differs():
    p = standard_pots()
    e = ParticleEnsemble(np.array([0.1, 1.0, 2.5]), np.array([0.5, 3.0, 1.0]), 1.0, M=1.0)
    a = interaction_drift(0, e, p)
    b = interaction_drift(0, e, p, literal_cutoff=True)
    assert a != pytest.approx(b)
    gam, _ = pair_terms(e, p, "direct", literal_cutoff=True, want_density=False)
    assert -p.dV.evaluate(e.positions[0]) - gam[0] == pytest.approx(b, abs=1e-12)


def test_pair_terms_match_pointwise():
    p = standard_pots()
    e = random_ensemble(40, 2, M=1.2)
    gam, dens = pair_terms(e, p, "direct")
    for i in (0, 17, 39):
        assert -p.dV.evaluate(e.positions[i]) - gam[i] == pytest.approx(
            interaction_drift(i, e, p), abs=1e-12)
        assert dens[i] == pytest.approx(mollified_density(e, e.positions[i]), rel=1e-12)
    assert np.allclose(gam, gamma_m(e.positions, e.positions, e.weights, p, 1.2), atol=1e-12)


@pytest.mark.parametrize("literal", [False, True])
def test_direct_and_spectral_agree(literal):
    p = standard_pots()
    e = random_ensemble(512, 3, eps=0.2, M=1.5)
    g1, d1 = pair_terms(e, p, "direct", literal_cutoff=literal)
    g2, d2 = pair_terms(e, p, "spectral", literal_cutoff=literal)
    assert np.abs(g1 - g2).max() <= 1e-6
    assert np.abs(d1 - d2).max() <= 1e-6
    with pytest.raises(ValueError):
        pair_terms(e, p, "bogus")


# mollified density and weight coefficients

def test_density_single_atom():
    e = ParticleEnsemble(np.array([1.3]), np.ones(1), 0.3)
    x = np.array([0.0, 1.3, 4.0])
    assert np.allclose(mollified_density(e, x), mollifier_eval(e.epsilon, x - 1.3), rtol=1e-14)


def test_density_floor():
    for seed in range(5):
        e = random_ensemble(30, seed, eps=0.1)
        _, dens = pair_terms(e, standard_pots(), "direct")
        assert dens.min() >= e.epsilon.floor
    # all mass antipodal to the probe point attains the floor
    e = ParticleEnsemble(np.full(3, math.pi), np.ones(3), 0.1)
    assert mollified_density(e, 0.0) == pytest.approx(e.epsilon.floor, rel=1e-12)


def test_density_monte_carlo_vs_quadrature():
    N = 100_000
    p = MollifierParam(0.2)
    e = init_ensemble(uniform_law(GRID), N, RngStreams(5), epsilon=p)
    mean, _ = quad(lambda y: float(mollifier_eval(p, y)) / TWO_PI, -math.pi, math.pi, epsabs=1e-14)
    second, _ = quad(lambda y: float(mollifier_eval(p, y)) ** 2 / TWO_PI, -math.pi, math.pi,
                     epsabs=1e-14)
    assert mean == pytest.approx(1 / TWO_PI, rel=1e-12)
    std = math.sqrt(second - mean * mean)
    probes = np.linspace(0, TWO_PI, 16, endpoint=False)
    vals = mollified_density(e, probes)
    assert np.all(np.abs(vals - mean) <= 3 * std / math.sqrt(N))


def test_weight_coefficients():
    e = ParticleEnsemble(np.array([0.7]), np.ones(1), 0.25)
    q = GRID.field(lambda x: 0.5 + np.sin(x))
    c = weight_drift_coeffs(0, e, [q])
    assert c[0] == pytest.approx(float(q.evaluate(0.7)) / e.epsilon.peak, rel=1e-12)
    assert np.all(weight_drift_coeffs(0, e, [GRID.zeros()]) == 0)


def test_weight_coefficient_bound():
    from smkv.torus import basis_field

    eps = MollifierParam(0.15)
    lam = {-2: 0.3, 0: 1.0, 1: 0.5}
    profiles = [basis_field(GRID, z) * v for z, v in lam.items()]
    for seed in range(4):
        e = random_ensemble(25, seed, eps=eps)
        for i in range(25):
            c = weight_drift_coeffs(i, e, profiles)
            for ci, (z, v) in zip(c, lam.items()):
                emax = 1 / math.sqrt(TWO_PI) if z == 0 else 1 / math.sqrt(math.pi)
                assert abs(ci) <= v * emax / eps.floor


# Euler-Maruyama step

def test_em_step_trivial():
    e = random_ensemble(10, 4)
    f = em_step(e, pots(), None, 0.01, [0.0], np.zeros(10))
    assert np.array_equal(f.positions, e.positions) and np.array_equal(f.weights, e.weights)
    assert f.t == pytest.approx(0.01)


def test_em_step_scalar_euler():
    # V = -cos gives V' = sin, so the drift at pi/2 is -1
    p = pots(V=lambda x: -np.cos(x))
    e = ParticleEnsemble(np.array([math.pi / 2]), np.ones(1), 1.0)
    f = em_step(e, p, None, 0.01, [0.0], np.zeros(1))
    assert f.positions[0] == pytest.approx(math.pi / 2 - 0.01, abs=1e-14)


def test_em_step_weights_frozen_without_profile():
    p = pots(V=np.cos, F=np.cos)
    e = random_ensemble(20, 5)
    rng = np.random.default_rng(0)
    f = em_step(e, p, None, 0.01, [0.3], rng.normal(size=20) * 0.1)
    assert np.array_equal(f.weights, e.weights)


def test_em_step_weight_increment():
    p = standard_pots()
    e = random_ensemble(30, 6, eps=0.3)
    f = em_step(e, p, None, 0.01, [0.2], np.zeros(30))
    for i in (0, 11, 29):
        expected = e.weights[i] + weight_drift_coeffs(i, e, [p.q])[0] * 0.2
        assert f.weights[i] == pytest.approx(expected, rel=1e-12)


def test_em_step_validation():
    e = random_ensemble(5, 7)
    with pytest.raises(ValueError):
        em_step(e, pots(), None, 0.0, [0.0], np.zeros(5))
    with pytest.raises(ValueError):
        em_step(e, pots(), None, 0.01, [0.0], np.zeros(4))
    with pytest.raises(ValueError):
        em_step(e, pots(), None, 0.01, [0.0, 1.0], np.zeros(5))


def test_em_step_floor_check(monkeypatch):
    import smkv.particles as mod

    e = random_ensemble(8, 8)
    real = mod.pair_terms

    def broken(*args, **kwargs):
        g, d = real(*args, **kwargs)
        return g, d * 0.0 + e.epsilon.floor * 0.5

    monkeypatch.setattr(mod, "pair_terms", broken)
    with pytest.raises(LowerBoundViolation):
        em_step(e, standard_pots(), None, 0.01, [0.1], np.zeros(8))


# full runs

def _run(e0, p, forcing, T=0.1, dt=0.01, seed=9, **kw):
    return simulate_particles(e0, p, forcing, T, dt, RngStreams(seed),
                              [ONE, basis_test_function(1)], **kw)


def test_periodicity_and_weight_freeze():
    p = pots(V=np.cos, F=np.cos)
    e0 = random_ensemble(50, 9)
    Y = sample_brownian(0.1, 0.01, RngStreams(1).substream("noise"))
    run = _run(e0, p, Forcing.single(p.q, Y), keep_states=True)
    for s in run.states:
        assert np.all((s.positions >= 0) & (s.positions < TWO_PI))
        assert np.array_equal(s.weights, e0.weights)
    path = weighted_pairing_trajectory(run, ONE)
    assert np.all(path.values == np.mean(e0.weights))


def test_zero_test_function_path():
    p = standard_pots()
    e0 = random_ensemble(20, 10)
    Y = linear_path(0.1, 1.0, 11)
    run = _run(e0, p, Forcing.single(p.q, Y), keep_states=True)
    zero = TestFunction("zero", lambda x: np.zeros_like(x))
    assert np.all(weighted_pairing_trajectory(run, zero).values == 0)


def test_observable_consistency():
    p = standard_pots()
    e0 = random_ensemble(40, 11, eps=0.3)
    Y = sample_brownian(0.1, 0.01, RngStreams(2).substream("noise"))
    run = _run(e0, p, Forcing.single(p.q, Y), keep_states=True)
    path = weighted_pairing_trajectory(run, ONE)
    for j in range(len(run.states) - 1):
        a, b = run.states[j], run.states[j + 1]
        assert path.values[j + 1] - path.values[j] == pytest.approx(
            np.mean(b.weights - a.weights), abs=1e-12)
        dY = float(Y(run.times[j + 1]) - Y(run.times[j]))
        expected = np.mean([weight_drift_coeffs(i, a, [p.q])[0] for i in range(a.N)]) * dY
        assert path.values[j + 1] - path.values[j] == pytest.approx(expected, abs=1e-12)


def test_run_deterministic_and_backend_consistent():
    p = standard_pots()
    e0 = random_ensemble(64, 12, M=1.5)
    Y = sample_brownian(0.1, 0.01, RngStreams(3).substream("noise"))
    f = Forcing.single(p.q, Y)
    a = _run(e0, p, f)
    b = _run(e0, p, f)
    c = _run(e0, p, f, nthreads=3)
    assert np.array_equal(a.final.positions, b.final.positions)
    assert np.array_equal(a.final.weights, c.final.weights)
    d = _run(e0, p, f, method="spectral")
    assert np.abs(a.final.weights - d.final.weights).max() < 1e-9


def test_exchangeability():
    p = standard_pots()
    N = 30
    e0 = random_ensemble(N, 13, M=2.0)
    Y = sample_brownian(0.1, 0.01, RngStreams(4).substream("noise"))
    f = Forcing.single(p.q, Y)
    perm = np.random.default_rng(0).permutation(N)
    a = _run(e0, p, f)
    b = _run(e0.permuted(perm), p, f, beta_order=perm)
    assert np.allclose(b.final.positions, a.final.positions[perm], atol=1e-12)
    assert np.allclose(b.final.weights, a.final.weights[perm], atol=1e-12)


def test_common_noise_structure():
    p = pots(q=lambda x: 0.5 + 0.4 * np.sin(x))
    N = 20
    rng = np.random.default_rng(5)
    x = rng.uniform(0, TWO_PI, N)
    x[1] = x[0]
    a = rng.normal(1.0, 0.3, N)
    a[1] = a[0]
    e0 = ParticleEnsemble(x, a, 0.3)
    Y = sample_brownian(0.1, 0.01, RngStreams(5).substream("noise"))
    run = _run(e0, p, Forcing.single(p.q, Y), keep_states=True)
    # positions are pure Brownian motions of their own substreams
    beta = BetaSource(RngStreams(9), N)
    pos = e0.positions.copy()
    for s in run.states[1:]:
        pos = np.mod(pos + math.sqrt(2.0) * beta.next(0.01), TWO_PI)
        assert np.allclose(torus_distance(pos, s.positions), 0, atol=1e-12)
    # with identical idiosyncratic noise the pair would remain identical; here
    # the weights differ only through the positions, so force equal streams
    order = np.arange(N)
    order[1] = 0
    run2 = _run(e0, p, Forcing.single(p.q, Y), beta_order=order)
    assert run2.final.positions[0] == run2.final.positions[1]
    assert run2.final.weights[0] == run2.final.weights[1]


# mean-field ensembles

def test_mean_field_examples():
    p = pots()
    e = random_ensemble(10, 14)
    f = mean_field_ensemble_step(e, p, GRID.zeros(), GRID.constant(1 / TWO_PI), 0.01, [0.5],
                                 np.zeros(10))
    assert np.allclose(f.positions, e.positions, atol=1e-14)
    c = 0.7
    pq = pots(q=lambda x: np.full_like(x, c))
    f = mean_field_ensemble_step(e, pq, GRID.zeros(), GRID.constant(1 / TWO_PI), 0.01, [0.5],
                                 np.zeros(10))
    assert np.allclose(f.weights - e.weights, TWO_PI * c * 0.5, rtol=1e-12)
    with pytest.raises(LowerBoundViolation):
        mean_field_ensemble_step(e, pq, GRID.zeros(), GRID.field(np.cos), 0.01, [0.5], np.zeros(10))


def _coupling_gap(N, seed, T=0.25, dt=2.5e-3):
    # mean-field ensemble at the same (eps, M, kappa) level, sharing every increment
    p = standard_pots()
    law = uniform_law(GRID, ("normal", 1.0, 0.25))
    streams = RngStreams(seed)
    Y = sample_brownian(T, dt, streams.substream("noise"))
    forcing = Forcing.single(p.q, Y)
    eps = MollifierParam(0.2)
    sol = solve_intermediate_rho("eps_M_kappa", law, p, forcing, T, dt, epsilon=eps)
    e_int = init_ensemble(law, N, streams, epsilon=eps)
    e_mf = e_int
    b1 = BetaSource(streams, N)
    worst = 0.0
    for j in range(len(sol.rho) - 1):
        dY = forcing.increments(sol.rho.times[j], sol.rho.times[j + 1])
        db = b1.next(dt)
        drift = p.dV + convolve(p.dF, sol.rho[j])
        den = mollify(sol.zeta[j], eps)
        e_int = em_step(e_int, p, None, dt, dY, db, method="spectral")
        e_mf = step_with_fields(e_mf, drift, den, [p.q], dt, dY, db)
        gap = np.mean(torus_distance(e_int.positions, e_mf.positions) ** 2
                      + (e_int.weights - e_mf.weights) ** 2)
        worst = max(worst, float(gap))
    return worst


def test_coupling_gap_shrinks_with_n():
    gaps = [np.mean([_coupling_gap(N, s) for s in (1, 2)]) for N in (250, 1000, 4000)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_trig_table_backends_identical():
    x = np.random.default_rng(0).uniform(0, TWO_PI, 257)
    a = kernels.trig_table(x, 40, backend="numpy")
    if kernels.BACKEND == "compiled":
        b = kernels.trig_table(x, 40, backend="compiled")
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    k = np.arange(1, 41)[:, None]
    assert np.allclose(a[0], np.cos(k * x), atol=1e-12)
    assert np.allclose(a[1], np.sin(k * x), atol=1e-12)
