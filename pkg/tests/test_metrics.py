import itertools
import math

import numpy as np
import pytest

from smkv.metrics import (ProductPoint, cost_matrix, product_distance, subsample, sup_pairing_gap,
                          torus_distance, wasserstein2_exact)
from smkv.paths import SampledPath
from smkv.torus import TWO_PI


def samples(rng, n):
    return np.column_stack([rng.uniform(0, TWO_PI, n), rng.normal(1.0, 1.0, n)])


def brute_force_w2(P, Q):
    C = cost_matrix(P, Q)
    n = len(P)
    best = min(sum(C[i, s[i]] for i in range(n)) for s in itertools.permutations(range(n)))
    return math.sqrt(best / n)


def test_torus_distance_examples():
    assert torus_distance(0.1, TWO_PI - 0.1) == pytest.approx(0.2, abs=1e-14)
    assert torus_distance(1.7, 1.7) == 0.0
    assert torus_distance(0.0, math.pi) == pytest.approx(math.pi)
    x = np.random.default_rng(0).uniform(-20, 20, (2, 1000))
    assert np.all(torus_distance(x[0], x[1]) <= math.pi)


def test_product_distance_examples():
    assert product_distance(ProductPoint(1.0, 2.0), ProductPoint(1.0, 2.0)) == 0.0
    assert product_distance((0.0, 0.0), (0.0, 3.0)) == 3.0
    assert product_distance((0.0, 0.0), (math.pi, 0.0)) == pytest.approx(math.pi)


def test_product_distance_metric_axioms():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        p, q, r = samples(rng, 3)
        assert product_distance(p, q) == product_distance(q, p)
        assert product_distance(p, r) <= product_distance(p, q) + product_distance(q, r) + 1e-12


def test_w2_examples():
    rng = np.random.default_rng(2)
    P = samples(rng, 7)
    assert wasserstein2_exact(P, P) == 0.0
    p, q = samples(rng, 1), samples(rng, 1)
    assert wasserstein2_exact(p, q) == pytest.approx(product_distance(p[0], q[0]), rel=1e-14)


def test_w2_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(50):
        P, Q = samples(rng, 5), samples(rng, 5)
        assert wasserstein2_exact(P, Q) == pytest.approx(brute_force_w2(P, Q), rel=1e-13)


def test_w2_triangle_and_symmetry():
    rng = np.random.default_rng(4)
    for _ in range(200):
        P, Q, R = samples(rng, 6), samples(rng, 6), samples(rng, 6)
        pq, qr, pr = wasserstein2_exact(P, Q), wasserstein2_exact(Q, R), wasserstein2_exact(P, R)
        assert pr <= pq + qr + 1e-10
        assert pq == pytest.approx(wasserstein2_exact(Q, P), rel=1e-13)


def test_w2_bounds_lipschitz_pairings():
    rng = np.random.default_rng(5)
    # 1-Lipschitz test functions for the product metric
    tests = [lambda x, a: np.sin(x), lambda x, a: a, lambda x, a: 0.6 * np.cos(x) + 0.8 * a,
             lambda x, a: np.abs(a)]
    for _ in range(200):
        P, Q = samples(rng, 8), samples(rng, 8)
        w = wasserstein2_exact(P, Q)
        for f in tests:
            gap = abs(f(P[:, 0], P[:, 1]).mean() - f(Q[:, 0], Q[:, 1]).mean())
            assert gap <= w + 1e-12


def test_w2_validation():
    rng = np.random.default_rng(6)
    with pytest.raises(ValueError):
        wasserstein2_exact(samples(rng, 3), samples(rng, 4))
    with pytest.raises(ValueError):
        wasserstein2_exact(samples(rng, 513), samples(rng, 513))
    with pytest.raises(ValueError):
        wasserstein2_exact(np.zeros((3, 3)), np.zeros((3, 3)))
    big = samples(rng, 2000)
    small = subsample(big, 512, rng)
    assert small.shape == (512, 2)
    assert subsample(small, 600, rng) is not None


def test_sup_pairing_gap():
    t = np.linspace(0, 1, 11)
    A = {"f": SampledPath(t, np.sin(t)), "g": SampledPath(t, t)}
    assert sup_pairing_gap(A, A) == {"f": 0.0, "g": 0.0}
    B = {k: SampledPath(v.times, v.values + 0.25) for k, v in A.items()}
    assert sup_pairing_gap(A, B)["f"] == pytest.approx(0.25)
    # a coarser mesh is compared on the union of both meshes
    C = {"f": SampledPath([0, 1], [0.0, 0.0]), "g": SampledPath([0, 0.5, 1], [0.0, 2.0, 0.0])}
    assert sup_pairing_gap(A, C) == sup_pairing_gap(C, A)
    assert sup_pairing_gap(A, C)["g"] == pytest.approx(1.5)
    with pytest.raises(ValueError):
        sup_pairing_gap(A, {"f": A["f"]})
    with pytest.raises(ValueError):
        sup_pairing_gap({"f": A["f"]}, {"f": SampledPath([0, 2], [0, 0])})
