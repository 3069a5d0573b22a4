"""Zero-inflated negative binomial regression by maximum likelihood.

With pi_i = logistic(z_i . gamma), mu_i = exp(x_i . beta) and dispersion
alpha = exp(log_alpha), r = 1/alpha::

    P(y=0) = pi + (1 - pi) (1 + alpha mu)^(-r)
    P(y=k) = (1 - pi) Gamma(k + r) / (Gamma(r) k!) (1 + alpha mu)^(-r) (alpha mu / (1 + alpha mu))^k

so Var(y | not structural zero) = mu + alpha mu^2. The parameter vector is
``concat(gamma, beta, [log_alpha])`` throughout.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import gammaln
from scipy.stats import norm

from .. import kernels
from .optimize import bfgs_maximize

Z95 = 1.959963984540054


@dataclass
class ZinbSpec:
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    x_names: tuple[str, ...]
    z_names: tuple[str, ...]

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Z = np.asarray(self.Z, dtype=np.float64)
        n = self.y.shape[0]
        if self.X.shape[0] != n or self.Z.shape[0] != n:
            raise ValueError("design matrices and outcome differ in row count")
        if self.X.shape[1] != len(self.x_names) or self.Z.shape[1] != len(self.z_names):
            raise ValueError("column names do not match design matrices")
        if np.any(self.y < 0):
            raise ValueError("counts must be non-negative")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Z))):
            raise ValueError("design matrices contain missing or non-finite values")

    @property
    def n_params(self) -> int:
        return self.Z.shape[1] + self.X.shape[1] + 1

    def split(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        pz = self.Z.shape[1]
        px = self.X.shape[1]
        return params[:pz], params[pz:pz + px], float(params[pz + px])


def zinb_loglik(params: np.ndarray, spec: ZinbSpec) -> tuple[float, np.ndarray]:
    """Log-likelihood and its analytic gradient."""
    params = np.asarray(params, dtype=np.float64)
    if not np.all(np.isfinite(params)):
        raise ValueError("parameters must be finite")
    gamma, beta, log_alpha = spec.split(params)
    with np.errstate(over="ignore", invalid="ignore"):
        ll_i, dz, dx, da = kernels.zinb_terms(spec.y, spec.Z @ gamma, spec.X @ beta, log_alpha)
        ll = float(np.sum(ll_i))
        grad = np.concatenate([spec.Z.T @ dz, spec.X.T @ dx, [np.sum(da)]])
    if not np.isfinite(ll):
        return -math.inf, grad
    return ll, grad


def zinb_pmf(k: np.ndarray | int, pi: float, mu: float, alpha: float) -> np.ndarray:
    """Probability mass at counts ``k`` for scalar parameters (used for checks)."""
    k = np.asarray(k, dtype=np.float64)
    r = 1.0 / alpha
    log_nb = (gammaln(k + r) - gammaln(r) - gammaln(k + 1.0) - r * np.log1p(alpha * mu)
              + k * (np.log(alpha * mu) - np.log1p(alpha * mu)))
    p = (1.0 - pi) * np.exp(log_nb)
    return np.where(k == 0, pi + p, p)


def simulate_zinb(rng: np.random.Generator, X: np.ndarray, Z: np.ndarray, gamma, beta, alpha: float) -> np.ndarray:
    """Draw counts from the model: structural zero w.p. pi, else gamma-Poisson."""
    pi = 1.0 / (1.0 + np.exp(-(Z @ np.asarray(gamma, dtype=float))))
    mu = np.exp(X @ np.asarray(beta, dtype=float))
    structural = rng.random(len(pi)) < pi
    r = 1.0 / alpha
    lam = rng.gamma(shape=r, scale=mu / r)
    y = rng.poisson(lam)
    y[structural] = 0
    return y.astype(np.int64)


def zero_probability(X, Z, gamma, beta, alpha) -> np.ndarray:
    pi = 1.0 / (1.0 + np.exp(-(Z @ np.asarray(gamma, dtype=float))))
    mu = np.exp(X @ np.asarray(beta, dtype=float))
    return pi + (1.0 - pi) * np.exp(-np.log1p(alpha * mu) / alpha)


# ---------------------------------------------------------------------------
# initialization


def _irls(X, y, family, iters=30, ridge=1e-8):
    p = X.shape[1]
    b = np.zeros(p)
    if family == "poisson":
        b[:] = np.linalg.lstsq(X, np.log(y + 0.5), rcond=None)[0]
    for _ in range(iters):
        eta = np.clip(X @ b, -30, 30)
        if family == "logistic":
            m = 1.0 / (1.0 + np.exp(-eta))
            w = np.maximum(m * (1.0 - m), 1e-10)
        else:
            m = np.exp(eta)
            w = np.maximum(m, 1e-10)
        z = eta + (y - m) / w
        A = X.T @ (w[:, None] * X) + ridge * np.eye(p)
        b_new = np.linalg.solve(A, X.T @ (w * z))
        if not np.all(np.isfinite(b_new)):
            break
        if np.max(np.abs(b_new - b)) < 1e-10:
            b = b_new
            break
        b = b_new
    return b if np.all(np.isfinite(b)) else np.zeros(p)


def initial_params(spec: ZinbSpec) -> np.ndarray:
    """Logistic fit of the zero indicator, Poisson fit on the positive counts, log alpha = 0."""
    gamma = _irls(spec.Z, (spec.y == 0).astype(float), "logistic")
    pos = spec.y > 0
    if pos.sum() > spec.X.shape[1]:
        beta = _irls(spec.X[pos], spec.y[pos].astype(float), "poisson")
    else:
        beta = np.zeros(spec.X.shape[1])
    return np.concatenate([gamma, beta, [0.0]])


# ---------------------------------------------------------------------------
# fitting


def _standardizer(M: np.ndarray) -> np.ndarray:
    """T such that M @ T has centered, unit-variance non-constant columns.

    Centering is folded into the first all-ones column when one exists.
    """
    p = M.shape[1]
    T = np.eye(p)
    ones = [j for j in range(p) if np.all(M[:, j] == 1.0)]
    icpt = ones[0] if ones else None
    for j in range(p):
        if j == icpt:
            continue
        s = M[:, j].std()
        if s <= 0:
            continue
        T[j, j] = 1.0 / s
        if icpt is not None:
            T[icpt, j] = -M[:, j].mean() / s
    return T


def fd_hessian(grad_fn, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of an analytic gradient, symmetrized."""
    n = x.size
    H = np.empty((n, n))
    for k in range(n):
        h = rel_step * max(1.0, abs(x[k]))
        e = np.zeros(n)
        e[k] = h
        H[:, k] = (grad_fn(x + e) - grad_fn(x - e)) / (2.0 * h)
    return 0.5 * (H + H.T)


@dataclass
class ZinbFit:
    z_names: tuple[str, ...]
    x_names: tuple[str, ...]
    gamma: np.ndarray
    beta: np.ndarray
    log_alpha: float
    cov: np.ndarray | None
    loglik: float
    converged: bool
    n_iter: int
    message: str
    n_obs: int
    trace: list[float] = field(default_factory=list, repr=False)

    @property
    def alpha(self) -> float:
        return _exp(self.log_alpha)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.beta, [self.log_alpha]])

    @property
    def se(self) -> np.ndarray:
        if self.cov is None:
            return np.full(self.params.size, np.nan)
        return np.sqrt(np.diag(self.cov))

    @property
    def se_available(self) -> bool:
        return self.cov is not None

    def wald(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(lower, upper, two-sided p) on the estimation scale."""
        est, se = self.params, self.se
        with np.errstate(invalid="ignore", divide="ignore"):
            p = 2.0 * norm.sf(np.abs(est / se))
        return est - Z95 * se, est + Z95 * se, p

    def dispersion_ci(self) -> tuple[float, float]:
        lo, hi, _ = self.wald()
        return _exp(lo[-1]), _exp(hi[-1])

    def rows(self) -> list[dict]:
        lo, hi, p = self.wald()
        out = []
        pz = len(self.z_names)
        names = [("zero", n) for n in self.z_names] + [("count", n) for n in self.x_names]
        for k, (part, name) in enumerate(names):
            out.append({"part": part, "parameter": name, "estimate": float(self.params[k]),
                        "se": float(self.se[k]), "ci_low": float(lo[k]), "ci_high": float(hi[k]),
                        "p_value": float(p[k])})
        a_lo, a_hi = self.dispersion_ci()
        out.append({"part": "dispersion", "parameter": "dispersion", "estimate": self.alpha,
                    "se": float(self.se[-1]), "ci_low": a_lo, "ci_high": a_hi, "p_value": float("nan")})
        assert len(out) == pz + len(self.x_names) + 1
        return out

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["PART", "PARAMETER", "ESTIMATE", "SE", "CI_LOW", "CI_HIGH", "P_VALUE"])
            for r in self.rows():
                w.writerow([r["part"], r["parameter"], repr(r["estimate"]), repr(r["se"]),
                            repr(r["ci_low"]), repr(r["ci_high"]), repr(r["p_value"])])


def zinb_fit(
    spec: ZinbSpec,
    gtol: float = 1e-6,
    ftol: float = 1e-10,
    max_iter: int = 500,
    x0: np.ndarray | None = None,
    standardize: bool = True,
) -> ZinbFit:
    """Maximum-likelihood fit with Wald standard errors from the observed information.

    The search runs on centered/scaled design columns (an invertible linear
    reparametrization); estimates and covariance are mapped back exactly.
    """
    n, px = spec.X.shape
    pz = spec.Z.shape[1]
    if n < max(px, pz):
        raise ValueError("fewer rows than columns")
    if not (np.any(spec.y == 0) and np.any(spec.y > 0)):
        raise ValueError("outcome needs both zero and positive counts")
    Tz = _standardizer(spec.Z) if standardize else np.eye(pz)
    Tx = _standardizer(spec.X) if standardize else np.eye(px)
    T = np.zeros((pz + px + 1, pz + px + 1))
    T[:pz, :pz] = Tz
    T[pz:pz + px, pz:pz + px] = Tx
    T[-1, -1] = 1.0
    work = ZinbSpec(spec.y, spec.X @ Tx, spec.Z @ Tz, spec.x_names, spec.z_names)

    start = initial_params(spec) if x0 is None else np.asarray(x0, dtype=float)
    theta0 = np.linalg.solve(T, start)

    res = bfgs_maximize(lambda th: zinb_loglik(th, work), theta0, gtol=gtol, ftol=ftol, max_iter=max_iter)
    theta = res.x
    H = fd_hessian(lambda th: zinb_loglik(th, work)[1], theta)
    cov = None
    try:
        info = -H
        np.linalg.cholesky(info)
        cov_w = np.linalg.inv(info)
        cov = T @ cov_w @ T.T
        cov = 0.5 * (cov + cov.T)
        if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) <= 0):
            cov = None
    except np.linalg.LinAlgError:
        cov = None
    params = T @ theta
    gamma, beta, log_alpha = spec.split(params)
    return ZinbFit(spec.z_names, spec.x_names, gamma.copy(), beta.copy(), log_alpha, cov, res.f,
                   res.converged, res.n_iter, res.message if cov is not None else res.message + "; singular Hessian",
                   n, res.trace)


# ---------------------------------------------------------------------------
# effect measures


def _exp(x: float) -> float:
    # boundary fits can carry huge coefficients; report inf instead of raising
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def odds_ratio(coef: float) -> float:
    return _exp(coef)


def relative_change(coef: float, delta: float = 1.0) -> float:
    """exp(coef * delta) - 1: relative change in odds (zero part) or expected count (count part)."""
    try:
        return math.expm1(coef * delta)
    except OverflowError:
        return math.inf


@dataclass(frozen=True)
class EffectMeasure:
    part: str
    parameter: str
    coef: float
    delta: float
    ratio: float
    change: float


def zinb_effect_measures(fit: ZinbFit, deltas: Mapping[str, float] | None = None) -> list[EffectMeasure]:
    """Odds ratios (zero part) and expected-count ratios (count part) per covariate.

    ``deltas`` gives the covariate increment per name (default 1).
    """
    deltas = dict(deltas or {})
    out = []
    for part, names, coefs in (("zero", fit.z_names, fit.gamma), ("count", fit.x_names, fit.beta)):
        for name, c in zip(names, coefs):
            if name == "intercept":
                continue
            d = float(deltas.get(name, 1.0))
            out.append(EffectMeasure(part, name, float(c), d, _exp(c * d), relative_change(float(c), d)))
    return out


def dispersion_note(fit: ZinbFit) -> str | None:
    if fit.alpha > 1.0:
        return (f"Dispersion {fit.alpha:.3f} > 1: counts are overdispersed, so the negative binomial "
                f"count part is preferred over a Poisson one.")
    return None
