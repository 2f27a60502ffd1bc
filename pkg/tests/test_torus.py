import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.special import i0

from smkv.particles import ParticleEnsemble
from smkv.torus import (TWO_PI, CutoffParam, Field, MollifierParam, TorusGrid, basis_eval,
                        basis_field, bessel_i0_log, convolve, cutoff, heat_propagate,
                        mollifier_eval, mollifier_field, mollify, pairing, read_field,
                        sobolev_norm)


@pytest.fixture
def grid():
    return TorusGrid(64)


def random_field(grid, seed, modes=10):
    rng = np.random.default_rng(seed)
    c = np.zeros(grid.n_points // 2 + 1, dtype=complex)
    c[:modes] = rng.normal(size=modes) + 1j * rng.normal(size=modes)
    return Field.from_coeffs(grid, c)


# grid and field

def test_grid_rejects_odd_or_small():
    with pytest.raises(ValueError):
        TorusGrid(7)
    with pytest.raises(ValueError):
        TorusGrid(6)


def test_grid_nodes(grid):
    x = grid.nodes
    assert np.all(np.diff(x) > 0)
    assert x[0] == 0.0 and x[-1] < TWO_PI
    assert grid.spacing == pytest.approx(TWO_PI / 64)


def test_round_trip(grid):
    f = grid.field(lambda x: np.exp(np.sin(x)))
    g = Field.from_coeffs(grid, f.coeffs)
    assert np.allclose(g.values, f.values, rtol=1e-12, atol=0)


def test_spectral_is_conjugate_symmetric(grid):
    f = random_field(grid, 1)
    s = f.spectral()
    n = grid.n_points
    # index of mode z is z + n/2 - 1
    for z in range(1, n // 2):
        assert s[z + n // 2 - 1] == np.conj(s[-z + n // 2 - 1])


def test_parseval(grid):
    f = grid.field(lambda x: np.exp(np.cos(2 * x)) + np.sin(5 * x))
    assert f.spectral_energy() == pytest.approx(f.l2_norm() ** 2, rel=1e-12)


def test_field_csv_round_trip(tmp_path, grid):
    f = grid.field(np.cos)
    p = tmp_path / "f.csv"
    f.to_csv(p)
    assert p.read_text().splitlines()[0] == "x,value"
    g = read_field(p)
    assert g.grid == grid
    assert np.array_equal(g.values, f.values)


def test_field_grid_mismatch():
    with pytest.raises(ValueError):
        TorusGrid(8).constant(1.0) + TorusGrid(16).constant(1.0)


def test_evaluate_matches_function_off_grid(grid):
    f = grid.field(lambda x: np.exp(np.sin(x)))
    x = np.linspace(0.01, 6.2, 37)
    assert np.allclose(f.evaluate(x), np.exp(np.sin(x)), atol=1e-12)


# basis

def test_basis_examples():
    assert basis_eval(0, 1.3) == pytest.approx(1 / math.sqrt(TWO_PI))
    assert basis_eval(0, 1.3) == pytest.approx(0.3989423, abs=1e-7)
    assert basis_eval(1, 0.0) == 0.0


def test_basis_orthonormal(grid):
    fs = {z: basis_field(grid, z) for z in range(-4, 5)}
    for a in fs:
        for b in fs:
            val = pairing(fs[a], fs[b])
            assert val == pytest.approx(1.0 if a == b else 0.0, abs=1e-12)


# heat semigroup

def test_heat_mode_decay(grid):
    f = basis_field(grid, 2)
    g = heat_propagate(f, 0.5)
    assert g.coeffs[2] == pytest.approx(math.exp(-2.0) * f.coeffs[2], rel=1e-12)
    assert np.allclose(g.values, math.exp(-2.0) * f.values, atol=1e-15)


def test_heat_identity_and_constants(grid):
    f = random_field(grid, 2)
    assert heat_propagate(f, 0.0) is f
    c = grid.constant(3.5)
    assert np.allclose(heat_propagate(c, 7.0).values, 3.5, rtol=1e-14)
    with pytest.raises(ValueError):
        heat_propagate(f, -0.1)


def test_heat_semigroup_law(grid):
    f = random_field(grid, 3)
    a = heat_propagate(heat_propagate(f, 0.1), 0.25)
    b = heat_propagate(f, 0.35)
    assert np.allclose(a.values, b.values, atol=1e-12)


# convolution

def test_convolve_sin_sin(grid):
    s = grid.field(np.sin)
    h = convolve(s, s)
    assert np.abs(h.values + math.pi * np.cos(grid.nodes)).max() <= 1e-10


def test_convolve_derivative_with_constant(grid):
    F = grid.field(lambda x: np.cos(x) + np.sin(3 * x))
    assert np.abs(convolve(F.derivative(), grid.constant(2.0)).values).max() < 1e-13


def test_convolve_commutes(grid):
    f, g = random_field(grid, 4), random_field(grid, 5)
    assert np.allclose(convolve(f, g).values, convolve(g, f).values, atol=1e-12)


def test_convolve_matches_quadrature():
    grid = TorusGrid(32)
    f = grid.field(lambda x: np.exp(np.cos(x)))
    g = grid.field(lambda x: np.sin(2 * x) + 0.5)
    x0 = 1.1
    ref, _ = quad(lambda y: math.exp(math.cos(x0 - y)) * (math.sin(2 * y) + 0.5), 0, TWO_PI,
                  epsabs=1e-13)
    assert convolve(f, g).evaluate(x0) == pytest.approx(ref, abs=1e-11)


def test_mollification_refines():
    grid = TorusGrid(256)
    g = grid.field(lambda x: np.exp(np.sin(x)))
    errs = [np.abs(mollify(g, MollifierParam(e)).values - g.values).max() for e in (0.5, 0.2, 0.1)]
    assert errs[0] > errs[1] > errs[2]
    # quadrature oracle at one point for eps = 0.2
    p = MollifierParam(0.2)
    x0 = 0.7
    ref, _ = quad(lambda y: float(mollifier_eval(p, x0 - y)) * math.exp(math.sin(y)), 0, TWO_PI,
                  epsabs=1e-12, limit=200)
    assert mollify(g, p).evaluate(x0) == pytest.approx(ref, abs=1e-10)


# Bessel and mollifier

def test_bessel_series_oracle():
    series = sum((0.5) ** (2 * k) / math.factorial(k) ** 2 for k in range(50))
    assert bessel_i0_log(1.0) == pytest.approx(math.log(series), rel=1e-15)
    assert series == pytest.approx(1.2660658, abs=1e-7)


def test_bessel_small_and_invalid():
    assert abs(bessel_i0_log(1e-9)) < 1e-17
    with pytest.raises(ValueError):
        bessel_i0_log(0.0)
    with pytest.raises(ValueError):
        bessel_i0_log(-1.0)


def test_bessel_branches_agree_at_switch():
    from smkv.torus import _log_i0_asymptotic, _log_i0_series

    a, b = _log_i0_series(20.0), _log_i0_asymptotic(20.0)
    assert abs(a - b) <= 1e-10 * abs(a)


@pytest.mark.parametrize("u", [0.3, 2.0, 7.5, 19.9, 20.1, 45.0, 150.0])
def test_bessel_against_scipy(u):
    assert bessel_i0_log(u) == pytest.approx(math.log(i0(u)), rel=1e-12)


def test_mollifier_ratio():
    for e in (1.0, 0.3, 0.05):
        p = MollifierParam(e)
        r = mollifier_eval(p, 0.0) / mollifier_eval(p, math.pi)
        assert r == pytest.approx(math.exp(2 / e), rel=1e-12)


def test_mollifier_flat_limit():
    x = np.linspace(0, TWO_PI, 50)
    assert np.allclose(mollifier_eval(MollifierParam(1e6), x), 1 / TWO_PI, atol=1e-6)


@pytest.mark.parametrize("eps", [0.5, 0.2, 0.1, 0.05])
def test_mollifier_normalised_and_floored(eps):
    p = MollifierParam(eps)
    f = mollifier_field(TorusGrid(1024), p)
    assert abs(f.integral() - 1) <= 1e-10
    assert f.values.min() >= p.floor
    assert f.values.max() <= p.peak * (1 + 1e-12)


def test_mollifier_even_and_tiny_eps():
    p = MollifierParam(1e-3)
    x = np.linspace(-3, 3, 41)
    v = mollifier_eval(p, x)
    assert np.all(np.isfinite(v))
    # away from the origin the exact value is below the smallest double
    near = np.abs(x) <= 1.0
    assert np.all(v[near] > 0)
    assert float(mollifier_eval(p, 0.0)) == pytest.approx(p.peak, rel=1e-12)
    assert np.allclose(v, mollifier_eval(p, -x), rtol=1e-14)


def test_mollifier_param_validation():
    with pytest.raises(ValueError):
        MollifierParam(0.0)


def test_mollifier_fourier_ratios_match_quadrature():
    p = MollifierParam(0.3)
    r = p.fourier_ratios(4)
    for k in range(5):
        ref, _ = quad(lambda x: float(mollifier_eval(p, x)) * math.cos(k * x), -math.pi, math.pi,
                      epsabs=1e-13)
        assert r[k] == pytest.approx(ref, abs=1e-12)


# cutoff

def test_cutoff_examples():
    assert cutoff(2.0, 1.5) == 1.5
    assert cutoff(2.0, 5.0) == 0.0
    assert cutoff(2.0, 3.0) == 1.0
    assert cutoff(2.0, -3.0) == -1.0
    assert cutoff(CutoffParam(2.0), 4.0) == 0.0


def test_cutoff_lipschitz_and_bounded():
    rng = np.random.default_rng(0)
    a, b = rng.normal(scale=6, size=(2, 100_000))
    for M in (0.5, 2.0, 3.0):
        ca, cb = cutoff(M, a), cutoff(M, b)
        assert np.all(np.abs(ca - cb) <= np.abs(a - b) + 1e-15)
        assert np.all(np.abs(ca) <= M)


def test_cutoff_infinite_is_identity():
    a = np.array([-1e9, 3.0])
    assert np.array_equal(cutoff(math.inf, a), a)


def test_cutoff_param_validation():
    with pytest.raises(ValueError):
        CutoffParam(0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.1, 10), st.floats(-50, 50), st.floats(-50, 50))
def test_cutoff_lipschitz_property(M, a, b):
    assert abs(cutoff(M, a) - cutoff(M, b)) <= abs(a - b) + 1e-12


# pairings and norms

def test_pairing_examples(grid):
    e = ParticleEnsemble(np.array([0.1, 1.0, 2.0]), np.ones(3), 1.0)
    assert pairing(lambda x: np.ones_like(x), e) == 1.0
    e = ParticleEnsemble(np.array([0.1, 1.0, 2.0]), np.array([2.0, 0.0, 4.0]), 1.0)
    assert pairing(lambda x: np.ones_like(x), e) == 2.0
    e1 = basis_field(grid, 1)
    assert pairing(e1, e1) == pytest.approx(1.0, abs=1e-12)


def test_sobolev_examples(grid):
    assert sobolev_norm(grid.zeros(), 2) == 0.0
    assert sobolev_norm(basis_field(grid, 1), 1) == pytest.approx(math.sqrt(2), abs=1e-12)
    for k in range(5):
        assert sobolev_norm(grid.constant(-1.5), k) == pytest.approx(1.5 * math.sqrt(TWO_PI), rel=1e-12)
    with pytest.raises(ValueError):
        sobolev_norm(grid.zeros(), 5)


def test_sobolev_nyquist_warning():
    grid = TorusGrid(16)
    f = grid.field(lambda x: np.cos(8 * x))
    with pytest.warns(RuntimeWarning):
        sobolev_norm(f, 2)
