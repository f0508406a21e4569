import math
from functools import lru_cache

import numpy as np
import pytest

from poolcox.coxfit import DesignSpec, newton_fit
from poolcox.frailty import (FrailtyProblem, FrailtySpec, fit_frailty, inner_fit, penalized_loglik,
                             penalized_score_and_information, penalty)
from poolcox.simgen import Scenario, generate_batch, generate_randomized_dataset

from conftest import make_dataset, random_small


def naive_penalized(ds, beta, b, dist, theta):
    """Breslow partial likelihood of the augmented design by enumeration, plus the frailty penalty."""
    eta = ds.covariates @ np.atleast_1d(beta) + np.asarray(b)[ds.trial_id]
    ll = 0.0
    for i in np.flatnonzero(ds.event):
        ll += eta[i] - math.log(np.exp(eta[ds.time >= ds.time[i]]).sum())
    if dist == "gamma":
        return ll + sum(bs - math.exp(bs) for bs in b) / theta
    return ll - sum(bs * bs for bs in b) / (2 * theta)


def test_spec_validation():
    with pytest.raises(ValueError):
        FrailtySpec("gamma", 0.0)
    with pytest.raises(ValueError):
        FrailtySpec("weibull", 1.0)


def test_penalty_at_origin():
    b = np.zeros(4)
    assert penalty(b, FrailtySpec("log-normal", 0.3))[0] == 0.0
    assert penalty(b, FrailtySpec("gamma", 0.5))[0] == pytest.approx(-4 / 0.5)


def test_penalized_loglik_at_origin(rng):
    ds = random_small(rng, n=12, n_trials=3)
    unpen = naive_penalized(ds, [0.3], np.zeros(3), "log-normal", 1.0)
    assert penalized_loglik(ds, 0.3, np.zeros(3), FrailtySpec("log-normal", 2.0)) == pytest.approx(unpen, abs=1e-12)
    assert penalized_loglik(ds, 0.3, np.zeros(3), FrailtySpec("gamma", 2.0)) == pytest.approx(unpen - 3 / 2.0,
                                                                                           abs=1e-12)


@pytest.mark.parametrize("dist", ["gamma", "log-normal"])
def test_penalized_loglik_matches_enumeration(rng, dist):
    for _ in range(20):
        ds = random_small(rng, n=15, n_trials=3, ties=True)
        beta, b, theta = rng.normal(), rng.normal(scale=0.5, size=3), float(rng.uniform(0.1, 2))
        got = penalized_loglik(ds, beta, b, FrailtySpec(dist, theta))
        assert got == pytest.approx(naive_penalized(ds, beta, b, dist, theta), abs=1e-10)


@pytest.mark.parametrize("dist", ["gamma", "log-normal"])
def test_penalized_gradient_finite_differences(rng, dist):
    for n_trials in (1, 3):
        ds = random_small(rng, n=12, n_trials=n_trials)
        spec = FrailtySpec(dist, 0.7)
        x = rng.normal(scale=0.5, size=1 + n_trials)
        g, H = penalized_score_and_information(ds, x[:1], x[1:], spec)
        h = 1e-5
        for j in range(len(x)):
            e = np.zeros_like(x)
            e[j] = h
            f = lambda v: penalized_loglik(ds, v[:1], v[1:], spec)
            fd = (f(x + e) - f(x - e)) / (2 * h)
            assert g[j] == pytest.approx(fd, rel=1e-6, abs=1e-8)
            fd_g = (penalized_score_and_information(ds, (x + e)[:1], (x + e)[1:], spec)[0]
                    - penalized_score_and_information(ds, (x - e)[:1], (x - e)[1:], spec)[0]) / (2 * h)
            np.testing.assert_allclose(H[:, j], -fd_g, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("dist", ["gamma", "log-normal"])
def test_tiny_theta_reproduces_unadjusted(rng, dist):
    for _ in range(5):
        ds = random_small(rng, n=60, n_trials=4)
        fit = inner_fit(ds, FrailtySpec(dist, 1e-8))
        assert fit.converged
        assert np.max(np.abs(fit.b)) < 1e-5
        assert abs(fit.beta[0] - newton_fit(ds, DesignSpec("unadjusted")).beta[0]) < 1e-4


def test_huge_theta_approaches_fixed_effect():
    # groups mixed within trials, so the group effect is identified apart from the trial effects
    sc = Scenario(n_trials=5, n_patients=600, n_datasets=5, frailty_scale=0.5, hazard_ratio=1.5, master_seed=40)
    for i in range(sc.n_datasets):
        ds = generate_randomized_dataset(sc, i)
        fe = newton_fit(ds, DesignSpec("fixed-effect"))
        assert fe.dropped_aliased == () and all(fe.estimable)
        fit = inner_fit(ds, FrailtySpec("log-normal", 1e6))
        assert abs(fit.beta[0] - fe.beta[0]) < 1e-3
        # trial effects match the fixed-effect contrasts against trial 0
        np.testing.assert_allclose(fit.b[1:] - fit.b[0], fe.beta[1:], atol=1e-3)


@pytest.mark.parametrize("dist", ["gamma", "log-normal"])
def test_inner_optimum_by_grid_refinement(dist):
    rng = np.random.default_rng(3)
    ds = random_small(rng, n=12, n_trials=3)
    spec = FrailtySpec(dist, 0.5)
    fit = inner_fit(ds, spec)
    x = np.concatenate([fit.beta, fit.b])
    f = lambda v: naive_penalized(ds, v[:1], v[1:], dist, spec.theta)
    offsets = np.linspace(-0.05, 0.05, 1001)
    for _ in range(2):
        for j in range(len(x)):
            vals = []
            for o in offsets:
                v = x.copy()
                v[j] += o
                vals.append(f(v))
            assert abs(offsets[int(np.argmax(vals))]) < 1e-3
            x[j] += offsets[int(np.argmax(vals))]
    np.testing.assert_allclose(x, np.concatenate([fit.beta, fit.b]), atol=1e-3)


def test_requires_two_trials():
    ds = make_dataset([1.0, 2.0], [True, True], [[0.0], [1.0]])
    with pytest.raises(ValueError, match="2 trials"):
        fit_frailty(ds, "gamma")


def _replicated_trials(n_trials=4):
    # every trial holds identical subjects, so no between-trial variation exists
    base_t = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
    base_e = np.array([1, 1, 0, 1, 1, 1, 0, 1], bool)
    base_x = np.array([0, 1, 0, 1, 1, 0, 1, 0], float)
    trial = np.repeat(np.arange(n_trials), len(base_t))
    return make_dataset(np.tile(base_t, n_trials), np.tile(base_e, n_trials), np.tile(base_x, n_trials)[:, None],
                        trial, n_trials)


@pytest.mark.parametrize("dist", ["gamma", "log-normal"])
def test_no_frailty_hits_lower_bound(dist):
    ds = _replicated_trials()
    fit = fit_frailty(ds, dist)
    assert fit.no_frailty_detected
    assert fit.theta_hat == pytest.approx(1e-8)
    assert fit.converged
    assert abs(fit.beta[0] - newton_fit(ds, DesignSpec("unadjusted")).beta[0]) < 1e-4


@pytest.mark.parametrize("dist", ["gamma", "log-normal"])
def test_centering_at_optimum(dist):
    ds = generate_batch(Scenario(n_trials=8, n_patients=800, n_datasets=1, frailty_scale=0.5, master_seed=6))
    ds = next(iter(ds))
    fit = fit_frailty(ds, dist)
    assert fit.theta_hat > 1e-6
    if dist == "log-normal":
        assert abs(np.mean(fit.b)) < 1e-6
    else:
        assert abs(np.mean(np.exp(fit.b)) - 1) < 1e-6


def test_theta_continuity():
    rng = np.random.default_rng(11)
    ds = random_small(rng, n=40, n_trials=4)
    prob = FrailtyProblem(ds)

    def max_jump(n):
        betas = [prob.inner_fit(FrailtySpec("log-normal", t)).beta[0] for t in np.geomspace(1e-3, 10, n)]
        return np.max(np.abs(np.diff(betas)))

    coarse, fine = max_jump(41), max_jump(81)
    assert fine <= 0.6 * coarse


def test_json_fields():
    ds = _replicated_trials()
    out = fit_frailty(ds, "log-normal").to_json()
    assert {"theta_hat", "b", "marginal_loglik", "distribution", "beta", "se", "converged"} <= set(out)
    assert out["distribution"] == "log-normal"


@lru_cache(maxsize=None)
def _batch_fits():
    sc = Scenario(n_trials=10, n_patients=500, n_datasets=200, unevenness=0.5, frailty_scale=0.5,
                  master_seed=2024)
    return [(fit_frailty(ds, "gamma"), fit_frailty(ds, "log-normal")) for ds in generate_batch(sc)]


@pytest.mark.slow
def test_theta_positive_in_majority():
    fits = _batch_fits()
    for k in (0, 1):
        assert sum(f[k].theta_hat > 1e-6 for f in fits) > len(fits) / 2
        assert all(f[k].converged for f in fits)


@pytest.mark.slow
def test_gamma_se_not_larger_than_lognormal_on_average():
    fits = [f for f in _batch_fits() if f[0].estimable[0] and f[1].estimable[0]]
    assert len(fits) > 150
    assert np.mean([g.std_err[0] for g, _ in fits]) <= np.mean([ln.std_err[0] for _, ln in fits])


def test_gamma_marginal_matches_log_gamma_form():
    from scipy.special import gammaln

    ds = next(iter(generate_batch(Scenario(n_trials=5, n_patients=300, n_datasets=1, frailty_scale=0.5,
                                           master_seed=9))))
    prob = FrailtyProblem(ds)
    for theta in (0.05, 0.7, 4.0):
        spec = FrailtySpec("gamma", theta)
        fit = prob.inner_fit(spec)
        nu, D = 1 / theta, prob.deaths
        expect = fit.pll + np.sum(nu + gammaln(nu + D) - gammaln(nu) - (nu + D) * np.log(nu + D) + nu * np.log(nu))
        assert prob.marginal(fit, spec) == pytest.approx(expect, rel=1e-10)
