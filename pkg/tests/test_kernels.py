import os
import subprocess
import sys

import numpy as np
import pytest

from smkv import kernels
from smkv.torus import TWO_PI, MollifierParam

compiled = pytest.mark.skipif(kernels.BACKEND != "compiled", reason="compiled kernels not built")


def inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, TWO_PI, n)
    w = rng.normal(1.0, 0.5, n)
    return x, w, np.array([0.0, 0.3, 0.1]), np.array([1.0, 0.0, -0.2])


def reference(x, w, fc, fs, inv_eps, shift):
    d = x[:, None] - x[None, :]
    F = sum(a * np.cos((k + 1) * d) + b * np.sin((k + 1) * d) for k, (a, b) in enumerate(zip(fc, fs)))
    return (F @ w) / x.size, np.exp(inv_eps * (np.cos(d) - 1) - shift).mean(axis=1)


@pytest.mark.parametrize("backend", ["numpy", pytest.param("compiled", marks=compiled)])
def test_pair_sums_match_reference(backend):
    x, w, fc, fs = inputs(300)
    eps = MollifierParam(0.2)
    shift = eps.log_norm - 1 / eps.epsilon
    g, d = kernels.pair_sums(x, w, fc, fs, 5.0, shift, backend=backend)
    gr, dr = reference(x, w, fc, fs, 5.0, shift)
    assert np.allclose(g, gr, atol=1e-13)
    assert np.allclose(d, dr, rtol=1e-12)


@compiled
def test_backends_agree_and_threads_are_bitwise_stable():
    x, w, fc, fs = inputs(700, 1)
    a = kernels.pair_sums(x, w, fc, fs, 3.0, 0.1, backend="numpy")
    b = kernels.pair_sums(x, w, fc, fs, 3.0, 0.1, backend="compiled", nthreads=1)
    c = kernels.pair_sums(x, w, fc, fs, 3.0, 0.1, backend="compiled", nthreads=4)
    assert np.allclose(a[0], b[0], atol=1e-13) and np.allclose(a[1], b[1], rtol=1e-13)
    assert np.array_equal(b[0], c[0]) and np.array_equal(b[1], c[1])


def test_flags_skip_work():
    x, w, fc, fs = inputs(50)
    g, d = kernels.pair_sums(x, w, fc, fs, want_density=False)
    assert np.all(d == 0) and np.any(g != 0)
    g, d = kernels.pair_sums(x, w, fc, fs, want_drift=False)
    assert np.all(g == 0) and np.all(d > 0)


@pytest.mark.parametrize("backend", ["numpy", pytest.param("compiled", marks=compiled)])
def test_trig_table(backend):
    x = np.random.default_rng(2).uniform(0, TWO_PI, 100)
    C, S = kernels.trig_table(x, 30, backend=backend)
    k = np.arange(1, 31)[:, None]
    assert np.allclose(C, np.cos(k * x), atol=1e-12) and np.allclose(S, np.sin(k * x), atol=1e-12)
    out = (np.empty((30, 100)), np.empty((30, 100)))
    C2, S2 = kernels.trig_table(x, 30, backend=backend, out=out)
    assert np.array_equal(C, C2) and np.array_equal(S, S2)
    with pytest.raises(ValueError):
        kernels.trig_table(x, 30, backend=backend, out=(np.empty((2, 2)), np.empty((2, 2))))


def test_pure_python_fallback_selected_by_environment():
    code = "from smkv import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, SMKV_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "numpy"
