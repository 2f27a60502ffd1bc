# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled O(N^2) particle kernels.

Every row is reduced sequentially in particle order, so the result does not
depend on the number of OpenMP threads.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, cos, sin

cnp.import_array()


def pair_sums(const double[::1] x, const double[::1] w,
              const double[::1] fp_cos, const double[::1] fp_sin,
              double inv_eps, double log_shift,
              bint want_drift, bint want_density, int nthreads=1):
    """Row sums (1/N) sum_j w_j F'(x_i - x_j) and (1/N) sum_j Phi(x_i - x_j).

    F'(d) = sum_k fp_cos[k-1] cos(k d) + fp_sin[k-1] sin(k d);
    Phi(d) = exp(inv_eps * (cos d - 1) - log_shift).
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t K = fp_cos.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double[::1] c = np.cos(x)
    cdef double[::1] s = np.sin(x)
    drift_arr = np.zeros(n)
    dens_arr = np.zeros(n)
    cdef double[::1] drift = drift_arr
    cdef double[::1] dens = dens_arr
    cdef double cd, sd, ck, sk, tmp, acc_f, acc_d, fval
    cdef double inv_n = 1.0 / n
    if nthreads < 1:
        nthreads = 1
    for i in prange(n, nogil=True, num_threads=nthreads, schedule="static"):
        acc_f = 0.0
        acc_d = 0.0
        for j in range(n):
            cd = c[i] * c[j] + s[i] * s[j]
            sd = s[i] * c[j] - c[i] * s[j]
            if want_drift:
                ck = cd
                sk = sd
                fval = 0.0
                for k in range(K):
                    fval = fval + fp_cos[k] * ck + fp_sin[k] * sk
                    tmp = ck * cd - sk * sd
                    sk = sk * cd + ck * sd
                    ck = tmp
                acc_f = acc_f + w[j] * fval
            if want_density:
                acc_d = acc_d + exp(inv_eps * (cd - 1.0) - log_shift)
        drift[i] = acc_f * inv_n
        dens[i] = acc_d * inv_n
    return drift_arr, dens_arr


def trig_table(const double[::1] x, Py_ssize_t K, C_arr=None, S_arr=None):
    """Arrays C[k-1, i] = cos(k x_i), S[k-1, i] = sin(k x_i) for k = 1..K.

    Built by the angle-addition recurrence, the same arithmetic as the
    NumPy fallback, so both backends return identical bits.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i, k
    if C_arr is None:
        C_arr = np.empty((K, n))
        S_arr = np.empty((K, n))
    if K == 0:
        return C_arr, S_arr
    cdef double[:, ::1] C = C_arr
    cdef double[:, ::1] S = S_arr
    for i in range(n):
        C[0, i] = cos(x[i])
        S[0, i] = sin(x[i])
    for k in range(1, K):
        for i in range(n):
            C[k, i] = C[k - 1, i] * C[0, i] - S[k - 1, i] * S[0, i]
            S[k, i] = S[k - 1, i] * C[0, i] + C[k - 1, i] * S[0, i]
    return C_arr, S_arr
