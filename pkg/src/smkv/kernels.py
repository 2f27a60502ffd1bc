"""Backend selection for the O(N^2) pairwise kernels.

The compiled extension is used when it imports; otherwise (or when
``SMKV_PURE_PYTHON=1``) a blocked NumPy implementation of the same formula
runs instead.
"""

from __future__ import annotations

import os

import numpy as np

try:
    if os.environ.get("SMKV_PURE_PYTHON"):
        raise ImportError("pure-python backend forced")
    from smkv import _kernels as _ext
except ImportError:  # pragma: no cover - depends on the build
    _ext = None

BACKEND = "compiled" if _ext is not None else "numpy"

_BLOCK = 256


def _pair_sums_numpy(x, w, fp_cos, fp_sin, inv_eps, log_shift, want_drift, want_density):
    n = x.size
    c, s = np.cos(x), np.sin(x)
    drift = np.zeros(n)
    dens = np.zeros(n)
    K = fp_cos.size
    for lo in range(0, n, _BLOCK):
        hi = min(lo + _BLOCK, n)
        cd = np.outer(c[lo:hi], c) + np.outer(s[lo:hi], s)
        sd = np.outer(s[lo:hi], c) - np.outer(c[lo:hi], s)
        if want_drift and K:
            ck, sk = cd, sd
            fval = np.zeros_like(cd)
            for k in range(K):
                fval += fp_cos[k] * ck + fp_sin[k] * sk
                ck, sk = ck * cd - sk * sd, sk * cd + ck * sd
            drift[lo:hi] = (fval @ w) / n
        if want_density:
            dens[lo:hi] = np.exp(inv_eps * (cd - 1.0) - log_shift).sum(axis=1) / n
    return drift, dens


def _trig_table_numpy(x, K, C=None, S=None):
    if C is None:
        C = np.empty((K, x.size))
        S = np.empty((K, x.size))
    if K == 0:
        return C, S
    C[0], S[0] = np.cos(x), np.sin(x)
    for k in range(1, K):
        C[k] = C[k - 1] * C[0] - S[k - 1] * S[0]
        S[k] = S[k - 1] * C[0] + C[k - 1] * S[0]
    return C, S


def trig_table(x, K, backend=None, out=None):
    """cos(k x) and sin(k x) for k = 1..K, shape (K, N) each.

    ``out`` may hold two C-contiguous (K, N) arrays to fill in place.
    """
    x = np.ascontiguousarray(x, dtype=float)
    K = int(K)
    C = S = None
    if out is not None:
        C, S = out
        if C.shape != (K, x.size) or S.shape != (K, x.size):
            raise ValueError("output arrays have the wrong shape")
    if (backend or BACKEND) == "compiled":
        if _ext is None:
            raise RuntimeError("compiled kernels are not available in this build")
        return _ext.trig_table(x, K, C, S)
    return _trig_table_numpy(x, K, C, S)


def pair_sums(x, w, fp_cos, fp_sin, inv_eps=1.0, log_shift=0.0,
              want_drift=True, want_density=True, nthreads=1, backend=None):
    """Row sums of the weighted interaction and of the Von Mises kernel.

    Returns ``(drift, density)`` with
    ``drift[i] = (1/N) sum_j w[j] F'(x[i] - x[j])`` and
    ``density[i] = (1/N) sum_j exp(inv_eps (cos(x[i] - x[j]) - 1) - log_shift)``.
    """
    x = np.ascontiguousarray(x, dtype=float)
    w = np.ascontiguousarray(w, dtype=float)
    fp_cos = np.ascontiguousarray(fp_cos, dtype=float)
    fp_sin = np.ascontiguousarray(fp_sin, dtype=float)
    backend = backend or BACKEND
    if backend == "compiled":
        if _ext is None:
            raise RuntimeError("compiled kernels are not available in this build")
        return _ext.pair_sums(x, w, fp_cos, fp_sin, float(inv_eps), float(log_shift),
                              bool(want_drift), bool(want_density), int(nthreads))
    return _pair_sums_numpy(x, w, fp_cos, fp_sin, inv_eps, log_shift, want_drift, want_density)
