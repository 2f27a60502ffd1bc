"""Distances on the torus times the real line and sup-over-time pairing gaps."""

from __future__ import annotations

import math
from typing import Dict, Mapping, NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from smkv.paths import SampledPath
from smkv.torus import TWO_PI

W2_MAX_SAMPLES = 512


class ProductPoint(NamedTuple):
    x: float
    a: float


def torus_distance(x, y):
    """Geodesic distance on the circle of length 2 pi."""
    # |x - y| first, so the result is exactly symmetric in its arguments
    d = np.mod(np.abs(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)), TWO_PI)
    out = np.minimum(d, TWO_PI - d)
    return float(out) if out.ndim == 0 else out


def product_distance(p, q):
    """sqrt(torus_distance(x, y)^2 + |a - b|^2) for points (x, a), (y, b)."""
    dx = torus_distance(p[0], q[0])
    da = np.asarray(p[1], dtype=float) - np.asarray(q[1], dtype=float)
    out = np.sqrt(dx * dx + da * da)
    return float(out) if np.ndim(out) == 0 else out


def _as_samples(P):
    arr = np.asarray(P, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) array of (x, a) samples, got shape {arr.shape}")
    return arr


def cost_matrix(P, Q) -> np.ndarray:
    P, Q = _as_samples(P), _as_samples(Q)
    dx = torus_distance(P[:, None, 0], Q[None, :, 0])
    da = P[:, None, 1] - Q[None, :, 1]
    return dx * dx + da * da


def wasserstein2_exact(P, Q) -> float:
    """W2 between two equal-weight empirical measures with the same count.

    Solved exactly as a linear assignment problem.
    """
    P, Q = _as_samples(P), _as_samples(Q)
    n = P.shape[0]
    if Q.shape[0] != n:
        raise ValueError(f"sample counts differ: {n} vs {Q.shape[0]}")
    if n == 0:
        raise ValueError("empty samples")
    if n > W2_MAX_SAMPLES:
        raise ValueError(f"exact W2 limited to {W2_MAX_SAMPLES} samples, got {n}; subsample first")
    C = cost_matrix(P, Q)
    r, c = linear_sum_assignment(C)
    return math.sqrt(max(float(C[r, c].sum()) / n, 0.0))


def subsample(P, n: int, rng: np.random.Generator) -> np.ndarray:
    P = _as_samples(P)
    if P.shape[0] <= n:
        return P
    return P[np.sort(rng.choice(P.shape[0], n, replace=False))]


def sup_pairing_gap(A: Mapping[str, SampledPath], B: Mapping[str, SampledPath]) -> Dict[str, float]:
    """sup_t |A_f(t) - B_f(t)| per test function, over the union of both meshes."""
    if set(A) != set(B):
        raise ValueError(f"test functions differ: {sorted(A)} vs {sorted(B)}")
    out = {}
    for name in A:
        a, b = A[name], B[name]
        if not (math.isclose(a.t0, b.t0, abs_tol=1e-12) and math.isclose(a.T, b.T, rel_tol=1e-12)):
            raise ValueError(f"horizon mismatch for {name!r}: [{a.t0}, {a.T}] vs [{b.t0}, {b.T}]")
        mesh = np.union1d(a.times, b.times)
        out[name] = float(np.abs(a(mesh) - b(mesh)).max())
    return out
