"""Shared trial frailty Cox models (cph-G, cph-L) by penalized partial likelihood.

The trial effects ``b_s = log(phi_s)`` enter as coefficients of trial
indicators.  For a fixed frailty variance theta the penalized partial
likelihood is maximised jointly in (beta, b); theta itself maximises an
approximate marginal likelihood: the exact profile correction for gamma
frailties, a Laplace approximation for log-normal ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .coxfit import (INFO_FLOOR, CoxProblem, DesignSpec, _float, _floats, _standard_errors, detect_aliasing,
                     maximize, runaway_mask)
from .dataset import PooledDataset

DISTRIBUTIONS = ("gamma", "log-normal")
THETA_BOUNDS = (1e-8, 100.0)
MODEL_NAMES = {"gamma": "cph-G", "log-normal": "cph-L"}


@dataclass(frozen=True)
class FrailtySpec:
    distribution: str
    theta: float

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown frailty distribution {self.distribution!r}")
        if not self.theta > 0:
            raise ValueError(f"frailty variance must be positive, got {self.theta}")


def penalty(b, spec: FrailtySpec):
    """Penalty value, gradient and (diagonal) negative Hessian in ``b``."""
    b = np.asarray(b, dtype=float)
    if spec.distribution == "gamma":
        nu = 1.0 / spec.theta
        eb = np.exp(b)
        return nu * np.sum(b - eb), nu * (1.0 - eb), nu * eb
    return -np.sum(b * b) / (2.0 * spec.theta), -b / spec.theta, np.full(len(b), 1.0 / spec.theta)


class FrailtyProblem:
    """Penalized partial likelihood over x = (beta, b) for one dataset.

    ``fixed_cols`` selects which dataset covariates enter as fixed effects
    (non-varying columns are left out by the caller).
    """

    def __init__(self, data: PooledDataset, fixed_cols=None, ties="breslow"):
        cov = np.asarray(data.covariates, dtype=float)
        if fixed_cols is None:
            fixed_cols = list(range(cov.shape[1]))
        self.fixed_cols = list(fixed_cols)
        self.k = len(self.fixed_cols)
        self.n_trials = data.n_trials
        ind = (data.trial_id[:, None] == np.arange(data.n_trials)[None, :]).astype(float)
        X = np.hstack([cov[:, self.fixed_cols], ind])
        self.cox = CoxProblem(data.time, data.event, X, np.zeros(len(data), dtype=np.int64), ties)
        self.deaths = np.bincount(data.trial_id[data.event], minlength=data.n_trials)

    def split(self, x):
        return x[: self.k], x[self.k:]

    def evaluate(self, x, spec: FrailtySpec, order=2):
        ll, g, H = self.cox.evaluate(x, order)
        pen, pg, ph = penalty(x[self.k:], spec)
        if order >= 1:
            g = g.copy()
            g[self.k:] += pg
        if order >= 2:
            H = H.copy()
            H[self.k:, self.k:] += np.diag(ph)
        return ll + pen, g, H

    def unpenalized(self, x) -> float:
        return self.cox.loglik(x)

    def inner_fit(self, spec: FrailtySpec, tol=1e-9, max_iter=100):
        x, pll, g, H, it, status = maximize(lambda v, o: self.evaluate(v, spec, o),
                                            np.zeros(self.k + self.n_trials), tol=tol, max_iter=max_iter)
        return InnerFit(x[: self.k], x[self.k:], pll, g, H, it, status != "max_iter")

    def marginal(self, inner: "InnerFit", spec: FrailtySpec) -> float:
        """Approximate integrated log-likelihood at the inner optimum."""
        b = inner.b
        if spec.distribution == "gamma":
            nu = 1.0 / spec.theta
            D = self.deaths
            # nu * sum(b - e^b + 1) written stably; the +nu per trial belongs to the correction
            total = self.unpenalized(np.concatenate([inner.beta, b])) - nu * np.sum(np.expm1(b) - b)
            for dk in D:
                total -= nu * math.log1p(dk / nu)
                if dk:
                    k = np.arange(dk)
                    total += float(np.sum(np.log1p((k - dk) / (nu + dk))))
            return float(total)
        Hbb = inner.info[self.k:, self.k:] * spec.theta
        sign, logdet = np.linalg.slogdet(Hbb)
        if sign <= 0:
            return -math.inf
        return float(inner.pll - 0.5 * logdet)


@dataclass(frozen=True)
class InnerFit:
    beta: np.ndarray
    b: np.ndarray
    pll: float
    grad: np.ndarray
    info: np.ndarray
    iterations: int
    converged: bool


def penalized_loglik(data: PooledDataset, beta, b, spec: FrailtySpec) -> float:
    prob = FrailtyProblem(data)
    return prob.evaluate(np.concatenate([np.atleast_1d(beta), b]).astype(float), spec, order=0)[0]


def penalized_score_and_information(data: PooledDataset, beta, b, spec: FrailtySpec):
    prob = FrailtyProblem(data)
    _, g, H = prob.evaluate(np.concatenate([np.atleast_1d(beta), b]).astype(float), spec)
    return g, H


def inner_fit(data: PooledDataset, spec: FrailtySpec, tol=1e-9, max_iter=100) -> InnerFit:
    return FrailtyProblem(data).inner_fit(spec, tol=tol, max_iter=max_iter)


@dataclass(frozen=True)
class FrailtyFit:
    model: str
    distribution: str
    beta: np.ndarray
    std_err: np.ndarray
    theta_hat: float
    b: np.ndarray
    loglik: float
    marginal_loglik: float
    inner_iterations: int
    outer_iterations: int
    converged: bool
    estimable: tuple[bool, ...]
    no_frailty_detected: bool
    dropped_aliased: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "beta": _floats(self.beta),
            "se": _floats(self.std_err),
            "loglik": _float(self.loglik),
            "converged": bool(self.converged),
            "estimable": [bool(e) for e in self.estimable],
            "dropped": [int(j) for j in self.dropped_aliased],
            "theta_hat": _float(self.theta_hat),
            "b": _floats(self.b),
            "marginal_loglik": _float(self.marginal_loglik),
            "distribution": self.distribution,
        }


def fit_frailty(data: PooledDataset, distribution: str, theta_bounds=THETA_BOUNDS, xatol=1e-6,
                tol=1e-9, max_iter=100) -> FrailtyFit:
    """Fit a shared trial frailty model, choosing theta by the approximate marginal likelihood.

    The search runs over log(theta) inside ``theta_bounds``; the lower bound
    is also evaluated directly and wins ties, in which case the fit reports
    that no frailty was detected.
    """
    if distribution not in DISTRIBUTIONS:
        raise ValueError(f"unknown frailty distribution {distribution!r}")
    if data.n_trials < 2:
        raise ValueError("frailty models need at least 2 trials")
    n_cov = data.covariates.shape[1]
    dropped = detect_aliasing(data, DesignSpec("unadjusted"))
    fixed = [j for j in range(n_cov) if j not in dropped]
    prob = FrailtyProblem(data, fixed)
    cache = {}

    def evaluate(log_theta):
        key = float(log_theta)
        if key not in cache:
            spec = FrailtySpec(distribution, math.exp(key))
            inner = prob.inner_fit(spec, tol=tol, max_iter=max_iter)
            cache[key] = (inner, prob.marginal(inner, spec))
        return cache[key]

    lo, hi = math.log(theta_bounds[0]), math.log(theta_bounds[1])
    res = optimize.minimize_scalar(lambda u: -evaluate(u)[1], bounds=(lo, hi), method="bounded",
                                   options={"xatol": xatol})
    candidates = [lo, float(res.x), hi]
    best = max(candidates, key=lambda u: (evaluate(u)[1], -u))
    inner, marg = evaluate(best)
    theta = math.exp(best)
    full_info = inner.info
    beta = np.full(n_cov, np.nan)
    se = np.full(n_cov, np.nan)
    estimable = np.zeros(n_cov, dtype=bool)
    runaway = runaway_mask(np.concatenate([inner.beta, inner.b]), inner.grad, full_info)
    if fixed:
        k = len(fixed)
        ok = (np.diag(full_info)[:k] >= INFO_FLOOR) & ~runaway[:k]
        sub_se = np.full(k, np.nan)
        if not runaway.any():
            sub_se = _standard_errors(full_info, np.ones(len(full_info), dtype=bool))[:k]
        elif ok.any():
            # drop the diverging directions before inverting
            sub_se = _standard_errors(full_info, ~runaway)[:k]
        ok &= np.isfinite(sub_se)
        beta[fixed] = inner.beta
        se[fixed] = np.where(ok, sub_se, np.nan)
        estimable[fixed] = ok
    inner_its = sum(v[0].iterations for v in cache.values())
    converged = bool(inner.converged and (res.success or best != float(res.x)))
    return FrailtyFit(
        model=MODEL_NAMES[distribution],
        distribution=distribution,
        beta=beta,
        std_err=se,
        theta_hat=theta,
        b=inner.b,
        loglik=inner.pll,
        marginal_loglik=marg,
        inner_iterations=inner_its,
        outer_iterations=len(cache),
        converged=converged,
        estimable=tuple(bool(e) for e in estimable),
        no_frailty_detected=best == lo,
        dropped_aliased=tuple(sorted(dropped)),
    )
