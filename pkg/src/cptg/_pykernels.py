"""Numpy implementations of the hot kernels; used when the extension is not built.

Both backends expose the same two functions with identical semantics:

``zinb_terms(y, eta_z, eta_x, log_alpha)``
    per-row log-likelihood and derivatives of the zero-inflated negative
    binomial with respect to the zero-part linear predictor, the count-part
    linear predictor and log(alpha).

``ranksum_counts(scores, k)``
    number of size-``k`` subsets of ``scores`` (non-negative integers) whose
    sum equals each value 0..sum(scores).
"""
from __future__ import annotations

import numpy as np
from scipy.special import digamma, gammaln

# rows with y above this use gammaln/digamma instead of exact finite sums
SUM_CUTOFF = 200


def zinb_terms(y, eta_z, eta_x, log_alpha):
    y = np.asarray(y, dtype=np.int64)
    eta_z = np.asarray(eta_z, dtype=np.float64)
    eta_x = np.asarray(eta_x, dtype=np.float64)
    alpha = np.exp(log_alpha)
    r = 1.0 / alpha
    mu = np.exp(eta_x)
    am = alpha * mu
    l1p = np.log1p(am)

    log_pi = -np.logaddexp(0.0, -eta_z)
    log_1mpi = -np.logaddexp(0.0, eta_z)
    pi = np.exp(log_pi)

    ll = np.empty_like(eta_x)
    dz = np.empty_like(eta_x)
    dx = np.empty_like(eta_x)
    da = np.empty_like(eta_x)

    zero = y == 0
    # y == 0: mixture of a structural zero and a negative-binomial zero
    lf0 = -r * l1p[zero]
    lp0 = np.logaddexp(log_pi[zero], log_1mpi[zero] + lf0)
    ll[zero] = lp0
    one_minus_f0 = -np.expm1(lf0)
    dz[zero] = np.exp(log_pi[zero] + log_1mpi[zero] - lp0) * one_minus_f0
    w = np.exp(log_1mpi[zero] + lf0 - lp0)
    dx[zero] = -w * mu[zero] / (1.0 + am[zero])
    da[zero] = w * (r * l1p[zero] - mu[zero] / (1.0 + am[zero]))

    pos = ~zero
    yp = y[pos]
    ap = am[pos]
    lp = l1p[pos]
    # sum_{j<y} log1p(alpha j) and sum_{j<y} 1/(1 + alpha j)
    slog = np.zeros(yp.shape)
    sinv = np.zeros(yp.shape)
    small = yp <= SUM_CUTOFF
    ys = yp[small]
    if ys.size:
        acc_log = np.zeros(ys.shape)
        acc_inv = np.zeros(ys.shape)
        for j in range(int(ys.max())):
            m = ys > j
            acc_log[m] += np.log1p(alpha * j)
            acc_inv[m] += 1.0 / (1.0 + alpha * j)
        slog[small] = acc_log
        sinv[small] = acc_inv
    big = ~small
    if big.any():
        yb = yp[big].astype(np.float64)
        slog[big] = gammaln(yb + r) - gammaln(r) + yb * log_alpha
        sinv[big] = r * (digamma(yb + r) - digamma(r))
    yf = yp.astype(np.float64)
    ll[pos] = log_1mpi[pos] + slog - gammaln(yf + 1.0) - r * lp + yf * (eta_x[pos] - lp)
    dz[pos] = -pi[pos]
    dx[pos] = (yf - mu[pos]) / (1.0 + ap)
    da[pos] = -sinv + r * lp - (mu[pos] - yf) / (1.0 + ap)
    return ll, dz, dx, da


def ranksum_counts(scores, k):
    scores = [int(s) for s in scores]
    if any(s < 0 for s in scores):
        raise ValueError("scores must be non-negative")
    k = int(k)
    if not 0 <= k <= len(scores):
        raise ValueError("subset size out of range")
    if len(scores) > 60:
        raise ValueError("exact counting limited to 60 items")
    total = sum(scores)
    dp = np.zeros((k + 1, total + 1), dtype=np.int64)
    dp[0, 0] = 1
    for s in scores:
        # descending subset size so each item is used at most once
        for c in range(k, 0, -1):
            if s == 0:
                dp[c] += dp[c - 1]
            else:
                dp[c, s:] += dp[c - 1, :-s]
    return dp[k]
