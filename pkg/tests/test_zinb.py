import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import nbinom

from cptg.stats.optimize import bfgs_maximize
from cptg.stats.zinb import (Z95, ZinbSpec, dispersion_note, initial_params, odds_ratio, relative_change,
                             simulate_zinb, zero_probability, zinb_effect_measures, zinb_fit, zinb_loglik, zinb_pmf)
from oracles import column_steps, fd_gradient, gradient_rel_error, zinb_loglik_reference


def _spec(n=200, seed=0, gamma=(-0.2, 0.8), beta=(0.5, -0.6), alpha=1.5):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    Z = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = simulate_zinb(rng, X, Z, gamma, beta, alpha)
    return ZinbSpec(y, X, Z, ("intercept", "x"), ("intercept", "z"))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 0.95), st.floats(0.01, 30), st.floats(0.01, 10))
def test_pmf_sums_to_one(pi, mu, alpha):
    k = np.arange(0, 20000)
    assert zinb_pmf(k, pi, mu, alpha).sum() == pytest.approx(1.0, abs=1e-8)


def test_pmf_without_inflation_is_negative_binomial():
    k = np.arange(40)
    mu, alpha = 3.7, 0.6
    r = 1 / alpha
    assert np.allclose(zinb_pmf(k, 0.0, mu, alpha), nbinom.pmf(k, r, r / (r + mu)), rtol=1e-12, atol=0)


def test_loglik_matches_scipy_reference():
    s = _spec()
    rng = np.random.default_rng(5)
    for _ in range(5):
        th = rng.normal(scale=0.7, size=s.n_params)
        assert zinb_loglik(th, s)[0] == pytest.approx(zinb_loglik_reference(th, s.y, s.X, s.Z), rel=1e-11)


def test_large_counts_use_the_same_likelihood():
    s = _spec()
    s = ZinbSpec(np.where(s.y > 0, s.y + 400, 0), s.X, s.Z, s.x_names, s.z_names)
    th = np.array([0.1, 0.3, 5.5, 0.2, -0.5])
    assert zinb_loglik(th, s)[0] == pytest.approx(zinb_loglik_reference(th, s.y, s.X, s.Z), rel=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_against_finite_differences(seed):
    s = _spec(seed=seed)
    th = np.random.default_rng(seed + 100).normal(scale=0.8, size=s.n_params)
    g = zinb_loglik(th, s)[1]
    fd = fd_gradient(lambda t: zinb_loglik(t, s)[0], th, column_steps(th, s))
    assert gradient_rel_error(g, fd) <= 1e-6


def test_tiny_alpha_approaches_poisson_limit():
    s = _spec(alpha=1.0)
    th = np.array([-1.0, 0.0, 0.4, 0.0, math.log(1e-7)])
    ll, g = zinb_loglik(th, s)
    pi = 1 / (1 + math.exp(1.0))
    mu = math.exp(0.4)
    y = s.y
    pois = np.where(y == 0, np.log(pi + (1 - pi) * math.exp(-mu)),
                    np.log1p(-pi) - mu + y * math.log(mu) - np.array([math.lgamma(v + 1) for v in y]))
    assert ll == pytest.approx(pois.sum(), rel=1e-5)
    assert np.all(np.isfinite(g))


def test_non_finite_parameters_rejected():
    with pytest.raises(ValueError):
        zinb_loglik(np.array([np.nan, 0, 0, 0, 0]), _spec())


def test_spec_validation():
    X = np.ones((3, 1))
    with pytest.raises(ValueError, match="row count"):
        ZinbSpec([0, 1], X, X, ("a",), ("a",))
    with pytest.raises(ValueError, match="non-negative"):
        ZinbSpec([0, -1, 2], X, X, ("a",), ("a",))
    with pytest.raises(ValueError, match="non-finite"):
        ZinbSpec([0, 1, 2], np.array([[1.0], [np.nan], [1.0]]), X, ("a",), ("a",))
    with pytest.raises(ValueError, match="names"):
        ZinbSpec([0, 1, 2], X, X, ("a", "b"), ("a",))


def test_fit_recovers_and_reports():
    s = _spec(n=4000, seed=3)
    fit = zinb_fit(s)
    assert fit.converged and fit.se_available
    truth = np.array([-0.2, 0.8, 0.5, -0.6, math.log(1.5)])
    assert np.all(np.abs(fit.params - truth) < 4 * fit.se)
    lo, hi, p = fit.wald()
    assert np.allclose(hi - lo, 2 * Z95 * fit.se)
    assert fit.dispersion_ci()[0] < fit.alpha < fit.dispersion_ci()[1]
    rows = fit.rows()
    assert [r["part"] for r in rows] == ["zero", "zero", "count", "count", "dispersion"]
    assert fit.loglik == pytest.approx(zinb_loglik_reference(fit.params, s.y, s.X, s.Z), rel=1e-10)


def test_standardization_does_not_change_the_optimum():
    s = _spec(n=800, seed=9)
    X = s.X.copy()
    X[:, 1] = X[:, 1] * 100 + 500  # badly scaled covariate
    s2 = ZinbSpec(s.y, X, s.Z, s.x_names, s.z_names)
    a = zinb_fit(s2)
    b = zinb_fit(s2, standardize=False, max_iter=5000)
    assert a.loglik >= b.loglik - 1e-6
    assert a.converged


def test_fit_preconditions():
    X = np.ones((4, 1))
    with pytest.raises(ValueError, match="zero and positive"):
        zinb_fit(ZinbSpec([0, 0, 0, 0], X, X, ("i",), ("i",)))
    with pytest.raises(ValueError, match="fewer rows"):
        zinb_fit(ZinbSpec([0], np.ones((1, 2)), np.ones((1, 2)), ("i", "x"), ("i", "x")))


def test_initial_params_are_finite():
    th = initial_params(_spec())
    assert th.shape == (5,) and np.all(np.isfinite(th)) and th[-1] == 0.0


def test_zero_probability_matches_simulation():
    rng = np.random.default_rng(1)
    n = 200_000
    X = np.ones((n, 1))
    y = simulate_zinb(rng, X, X, [0.2], [0.9], 2.0)
    p0 = zero_probability(X[:1], X[:1], [0.2], [0.9], 2.0)[0]
    assert abs((y == 0).mean() - p0) < 4 * math.sqrt(p0 * (1 - p0) / n)


@pytest.mark.parametrize("value,want", [
    (odds_ratio(-0.78), 0.458),
    (relative_change(0.024), 0.0243),
    (-relative_change(-1.079, 0.1), 0.102),
])
def test_effect_identities(value, want):
    assert round(value, 3 if want >= 0.1 else 4) == want


def test_effect_measures_and_note():
    s = _spec(n=1500, seed=2)
    fit = zinb_fit(s)
    eff = zinb_effect_measures(fit, {"x": 0.1})
    assert [(e.part, e.parameter) for e in eff] == [("zero", "z"), ("count", "x")]
    assert eff[1].delta == 0.1 and eff[1].ratio == pytest.approx(math.exp(fit.beta[1] * 0.1))
    assert eff[1].change == pytest.approx(eff[1].ratio - 1)
    assert (dispersion_note(fit) is None) == (fit.alpha <= 1)


def test_bfgs_trace_is_monotone_and_finds_maximum():
    c = np.array([1.0, -2.0, 0.5])
    A = np.array([[3.0, 0.5, 0.0], [0.5, 2.0, 0.3], [0.0, 0.3, 1.0]])
    res = bfgs_maximize(lambda x: (-(x - c) @ A @ (x - c), -2 * A @ (x - c)), np.zeros(3), gtol=1e-10)
    assert res.converged and np.allclose(res.x, c, atol=1e-8)
    assert all(b >= a for a, b in zip(res.trace, res.trace[1:]))


def test_bfgs_rejects_bad_start():
    with pytest.raises(ValueError):
        bfgs_maximize(lambda x: (math.nan, x), np.zeros(2))


def test_bfgs_zinb_trace_monotone():
    s = _spec(n=500, seed=4)
    res = bfgs_maximize(lambda th: zinb_loglik(th, s), initial_params(s))
    assert all(b >= a for a, b in zip(res.trace, res.trace[1:]))


def test_huge_coefficients_give_infinite_ratios():
    assert odds_ratio(5000.0) == math.inf and relative_change(5000.0) == math.inf
    assert relative_change(-5000.0) == -1.0
