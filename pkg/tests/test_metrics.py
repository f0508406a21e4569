import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from poolcox.metrics import (SUMMARY_COLUMNS, baseline_hazard_posterior, bayes_linreg, delta_stat,
                             is_significant, poly_average, rho_stat, summaries_to_csv, summarize_batch)


# exponential-gamma posterior

def test_posterior_three_events():
    post = baseline_hazard_posterior([1, 1, 1], [10_000] * 3)
    assert post.mean == pytest.approx(1e-4, rel=1e-5)
    assert post.shape == pytest.approx(3 + 1e-5)
    assert post.rate == pytest.approx(30_000 + 1e-5)


def test_posterior_no_events():
    post = baseline_hazard_posterior([0, 0, 0], [100, 100, 100])
    assert post.mean == pytest.approx(1e-5 / (300 + 1e-5), rel=1e-12)
    assert post.mean == pytest.approx(3.33e-8, abs=1e-10)


def test_posterior_no_data_is_prior():
    post = baseline_hazard_posterior([], [])
    assert (post.shape, post.rate) == (1e-5, 1e-5)


def test_posterior_interval_and_errors():
    post = baseline_hazard_posterior([1] * 20, [50.0] * 20)
    lo, hi = post.interval(0.95)
    assert lo < post.mean < hi
    assert stats.gamma.cdf(hi, a=post.shape, scale=1 / post.rate) == pytest.approx(0.975)
    with pytest.raises(ValueError, match="nonnegative"):
        baseline_hazard_posterior([1], [-1.0])
    with pytest.raises(ValueError):
        baseline_hazard_posterior([1, 0], [1.0])


def test_posterior_mean_limit():
    e, d = [1, 1, 1], [10_000] * 3
    a = baseline_hazard_posterior(e, d, alpha=1e-12, gamma=1e-12).mean
    b = baseline_hazard_posterior(e, d, alpha=1e-5, gamma=1e-5).mean
    assert a == pytest.approx(3 / 30_000, rel=1e-9)
    assert abs(a - b) / a < 1e-5


# Bayesian regression

def test_linreg_exact_line():
    h = np.linspace(0, 10, 50)
    post = bayes_linreg(h, 2 * h + 1)
    assert post.intercept == pytest.approx(1, abs=1e-2)
    assert post.slope == pytest.approx(2, abs=1e-2)
    np.testing.assert_allclose(post.coef_mean, np.polyfit(h, 2 * h + 1, 1)[::-1], atol=1e-2)
    assert np.all(post.sigma2_draws > 0)


def test_linreg_flat_response():
    h = np.linspace(0, 10, 30)
    post = bayes_linreg(h, np.full(30, 4.0) + np.random.default_rng(0).normal(0, 0.01, 30))
    assert abs(post.slope) < post.coef_sd[1]


def test_linreg_noisy_slope_against_closed_form():
    rng = np.random.default_rng(12)
    h = rng.uniform(0, 10, 200)
    v = 3 * h + rng.normal(0, 0.5, 200)
    post = bayes_linreg(h, v, seed=5)
    assert abs(post.slope - 3) < 3 * post.coef_sd[1]
    # flat-prior limit: coefficients are multivariate t around least squares
    X = np.vander(h, 2, increasing=True)
    ols, ssr = np.linalg.lstsq(X, v, rcond=None)[:2]
    df = 2 * 0.04 + len(v)
    scale2 = (2 * 0.04 + ssr[0]) / df * np.linalg.inv(X.T @ X)
    sd_t = np.sqrt(np.diag(scale2) * df / (df - 2))
    assert np.all(np.abs(post.coef_mean - ols) < 3 * sd_t / math.sqrt(1000))
    np.testing.assert_allclose(post.coef_sd, sd_t, rtol=0.05)


def test_linreg_quadratic_and_errors():
    h = np.linspace(-2, 2, 40)
    post = bayes_linreg(h, 0.5 * h ** 2 - h + 2, degree=2)
    np.testing.assert_allclose(post.coef_mean, [2, -1, 0.5], atol=1e-2)
    with pytest.raises(ValueError, match="3 points"):
        bayes_linreg([1, 2], [1, 2])
    with pytest.raises(ValueError):
        bayes_linreg([1, 2, 3], [1, 2, 3], degree=3)


def test_linreg_seeded():
    h = np.arange(10.0)
    a = bayes_linreg(h, h + np.sin(h), seed=3, n_draws=500)
    b = bayes_linreg(h, h + np.sin(h), seed=3, n_draws=500)
    np.testing.assert_array_equal(a.coef_draws, b.coef_draws)


# polynomial averaging

def test_poly_average_examples():
    assert poly_average([7.5], -3, 11) == pytest.approx(7.5)
    assert poly_average([0, 1], 0, 1) == pytest.approx(0.5)
    assert poly_average([0, 0, 1], 0, 3) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        poly_average([1, 2], 2, 2)


def test_poly_average_on_draws():
    draws = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    np.testing.assert_allclose(poly_average(draws, 0, 2), [1.0, 2.0, 2.0])


coef = st.floats(-10, 10, allow_nan=False)


@given(st.lists(coef, min_size=1, max_size=3), st.floats(-5, 5), st.floats(0.01, 10))
@settings(max_examples=100, deadline=None)
def test_poly_average_matches_quadrature(c, q, width):
    r = q + width
    # Gauss-Legendre with 5 nodes integrates polynomials up to degree 9 exactly
    nodes, weights = np.polynomial.legendre.leggauss(5)
    expect = 0.5 * weights @ np.polynomial.Polynomial(c)(q + (nodes + 1) * width / 2)
    assert poly_average(c, q, r) == pytest.approx(expect, rel=1e-12, abs=1e-12)


@given(st.lists(coef, min_size=3, max_size=3), st.lists(coef, min_size=3, max_size=3), coef,
       st.floats(-5, 5), st.floats(0.01, 10))
@settings(max_examples=50, deadline=None)
def test_poly_average_linear(a, b, k, q, width):
    a, b = np.array(a), np.array(b)
    lhs = poly_average(a + k * b, q, q + width)
    rhs = poly_average(a, q, q + width) + k * poly_average(b, q, q + width)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-9)


# comparison probabilities

def test_rho_examples():
    x = np.random.default_rng(0).normal(size=100)
    assert rho_stat(x, x, 1.0) == 1.0
    assert rho_stat(np.full(50, 10.0), np.zeros(50), 100.0) == 0.0
    d = np.random.default_rng(1).uniform(0, 10, 100_000)
    p = rho_stat(d, np.zeros_like(d), 100.0, ell=0.05)
    assert abs(p - 0.5) < 3 * math.sqrt(0.25 / len(d))


def test_rho_zero_reference():
    x, y = np.ones(1000), np.zeros(1000)
    r = np.full(1000, 100.0)
    r[:10] = 0.0
    assert rho_stat(x, y, r) == 1.0
    r[:11] = 0.0
    with pytest.raises(ValueError):
        rho_stat(x, y, r)


def test_delta_examples():
    x = np.arange(10.0)
    assert delta_stat(x, x) == 1.0
    assert delta_stat(x + 5, x, ell=1) == 0.0
    z = np.random.default_rng(2).standard_normal(100_000)
    p = delta_stat(z, np.zeros_like(z), ell=1.0)
    expect = stats.norm.cdf(1) - stats.norm.cdf(-1)
    assert expect == pytest.approx(0.6827, abs=1e-4)
    assert abs(p - expect) < 3 * math.sqrt(expect * (1 - expect) / len(z))


def test_significance_rule():
    assert is_significant(0.049)
    assert not is_significant(0.05)


draws = st.lists(st.floats(-100, 100), min_size=1, max_size=40)


@given(draws, st.data(), st.floats(0.001, 1), st.floats(0.001, 1))
@settings(max_examples=100, deadline=None)
def test_rho_delta_symmetric_and_monotone(x, data, l1, l2):
    y = data.draw(st.lists(st.floats(-100, 100), min_size=len(x), max_size=len(x)))
    r = data.draw(st.lists(st.floats(0.5, 100), min_size=len(x), max_size=len(x)))
    lo, hi = sorted((l1, l2))
    assert rho_stat(x, y, r, lo) == rho_stat(y, x, r, lo)
    assert delta_stat(x, y, lo) == delta_stat(y, x, lo)
    assert rho_stat(x, y, r, lo) <= rho_stat(x, y, r, hi)
    assert delta_stat(x, y, lo) <= delta_stat(x, y, hi)


# batch summaries

def _records(betas, ses, converged=True):
    return [{"model": "m", "beta": [b], "se": [s], "estimable": [True], "converged": converged}
            for b, s in zip(betas, ses)]


def test_summary_exact_truth():
    s = summarize_batch({"cph-G": _records([math.log(2)] * 10, [0.2] * 10)}, 2.0)["cph-G"]
    assert s.rel_bias_pct == pytest.approx(0.0, abs=1e-12)
    assert s.emp_sd == 0.0
    assert s.mean_se == pytest.approx(0.2)


def test_summary_certain_rejection():
    z = stats.norm.isf(0.0005)
    s = summarize_batch({"m": _records([z * 0.1] * 20, [0.1] * 20)}, 2.0)["m"]
    assert s.reject_rate == 1.0


def test_summary_power_and_type_one_monte_carlo():
    rng = np.random.default_rng(8)
    n = 1000
    power = summarize_batch({"m": _records(rng.normal(math.log(2), 0.1, n), [0.1] * n)}, 2.0)["m"]
    expect = stats.norm.cdf(math.log(2) / 0.1 - 1.959964)
    assert power.reject_rate >= expect - 3 * math.sqrt(expect * (1 - expect) / n)
    size = summarize_batch({"m": _records(rng.normal(0, 0.1, n), [0.1] * n)}, 1.0)["m"]
    assert abs(size.reject_rate - 0.05) < 3 * math.sqrt(0.05 * 0.95 / n)


def test_summary_relative_bias_definitions():
    s = summarize_batch({"m": _records([0.8, 0.6], [0.1, 0.1])}, 2.0)["m"]
    assert s.rel_bias_pct == pytest.approx(100 * (0.7 - math.log(2)) / math.log(2))
    s = summarize_batch({"m": _records([0.02, 0.04], [0.1, 0.1])}, 1.0)["m"]
    assert s.rel_bias_pct == pytest.approx(3.0)


def test_summary_counts_and_exclusions():
    recs = _records([0.1, 0.2], [0.1, 0.1])
    recs.append({"model": "m", "beta": [None], "se": [None], "estimable": [False], "converged": True})
    recs += _records([5.0], [0.1], converged=False)
    recs.append({"model": "m", "failed": True, "error": "boom"})
    s = summarize_batch({"m": recs}, 2.0)["m"]
    assert (s.n_datasets, s.n_estimable, s.n_non_estimable, s.n_unconverged, s.n_failed) == (5, 2, 1, 1, 1)
    assert s.n_estimable + s.n_non_estimable + s.n_unconverged + s.n_failed == s.n_datasets
    assert s.mean_beta == pytest.approx(0.15)
    assert 0 <= s.reject_rate <= 1


def test_summary_all_non_estimable():
    recs = [{"model": "cph-S", "beta": [None], "se": [None], "estimable": [False], "converged": True}] * 3
    s = summarize_batch({"cph-S": recs}, 2.0)["cph-S"]
    assert s.all_non_estimable
    assert s.n_non_estimable == 3
    assert math.isnan(s.mean_beta)


def test_summary_csv_columns():
    batch = summarize_batch({"cph-G": _records([0.5, 0.7], [0.2, 0.3]),
                             "cph-S": [{"beta": [None], "se": [None], "estimable": [False], "converged": True}]},
                            2.0, scenario_id="n_trials=3_hr=2")
    rows = list(csv.reader(io.StringIO(summaries_to_csv([batch]))))
    assert tuple(rows[0]) == SUMMARY_COLUMNS
    assert rows[1][:4] == ["n_trials=3_hr=2", "cph-G", "2", "0"]
    assert rows[2][4] == "nan"
