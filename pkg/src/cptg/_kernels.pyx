# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see _pykernels for the reference semantics."""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, expm1, fabs, lgamma, log, log1p
from scipy.special.cython_special cimport psi

cnp.import_array()

cdef enum:
    SUM_CUTOFF = 200


cdef inline double _logaddexp(double a, double b) nogil:
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def zinb_terms(y, eta_z, eta_x, double log_alpha):
    cdef cnp.int64_t[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef double[::1] ez = np.ascontiguousarray(eta_z, dtype=np.float64)
    cdef double[::1] ex = np.ascontiguousarray(eta_x, dtype=np.float64)
    cdef Py_ssize_t n = yv.shape[0], i
    cdef long j, yi
    ll_a = np.empty(n)
    dz_a = np.empty(n)
    dx_a = np.empty(n)
    da_a = np.empty(n)
    cdef double[::1] ll = ll_a, dz = dz_a, dx = dx_a, da = da_a
    cdef double alpha = exp(log_alpha)
    cdef double r = 1.0 / alpha
    cdef double mu, am, l1p, log_pi, log_1mpi, lf0, lp0, w, slog, sinv, yf
    with nogil:
        for i in range(n):
            mu = exp(ex[i])
            am = alpha * mu
            l1p = log1p(am)
            log_pi = -_logaddexp(0.0, -ez[i])
            log_1mpi = -_logaddexp(0.0, ez[i])
            yi = yv[i]
            if yi == 0:
                lf0 = -r * l1p
                lp0 = _logaddexp(log_pi, log_1mpi + lf0)
                ll[i] = lp0
                dz[i] = exp(log_pi + log_1mpi - lp0) * (-expm1(lf0))
                w = exp(log_1mpi + lf0 - lp0)
                dx[i] = -w * mu / (1.0 + am)
                da[i] = w * (r * l1p - mu / (1.0 + am))
            else:
                yf = <double>yi
                if yi <= SUM_CUTOFF:
                    slog = 0.0
                    sinv = 0.0
                    for j in range(yi):
                        slog = slog + log1p(alpha * j)
                        sinv = sinv + 1.0 / (1.0 + alpha * j)
                else:
                    slog = lgamma(yf + r) - lgamma(r) + yf * log_alpha
                    sinv = r * (psi(yf + r) - psi(r))
                ll[i] = log_1mpi + slog - lgamma(yf + 1.0) - r * l1p + yf * (ex[i] - l1p)
                dz[i] = -exp(log_pi)
                dx[i] = (yf - mu) / (1.0 + am)
                da[i] = -sinv + r * l1p - (mu - yf) / (1.0 + am)
    return ll_a, dz_a, dx_a, da_a


def ranksum_counts(scores, k):
    cdef list s = [int(v) for v in scores]
    cdef Py_ssize_t m = len(s), c, t, i
    cdef long kk = int(k)
    for v in s:
        if v < 0:
            raise ValueError("scores must be non-negative")
    if kk < 0 or kk > m:
        raise ValueError("subset size out of range")
    if m > 60:
        raise ValueError("exact counting limited to 60 items")
    cdef long total = sum(s)
    dp_a = np.zeros((kk + 1, total + 1), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] dp = dp_a
    cdef long sv
    dp[0, 0] = 1
    for i in range(m):
        sv = s[i]
        for c in range(kk, 0, -1):
            for t in range(total, sv - 1, -1):
                dp[c, t] += dp[c - 1, t - sv]
    return dp_a[kk].copy()
