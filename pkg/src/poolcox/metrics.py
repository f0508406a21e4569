"""Posterior summaries, model-comparison probabilities and batch performance metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

MODELS = ("cph-S", "cph-F", "cph-G", "cph-L")
SUMMARY_COLUMNS = ("scenario_id", "model", "n_estimable", "n_unconverged", "mean_beta",
                   "rel_bias_pct", "emp_sd", "mean_se", "reject_rate")


# ---------------------------------------------------------------------------
# exponential model with a gamma prior on the hazard

@dataclass(frozen=True)
class BaselinePosterior:
    shape: float
    rate: float
    alpha: float = 1e-5
    gamma: float = 1e-5

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    @property
    def dist(self):
        return stats.gamma(a=self.shape, scale=1.0 / self.rate)

    def interval(self, level: float = 0.95) -> tuple[float, float]:
        lo, hi = self.dist.interval(level)
        return float(lo), float(hi)


def baseline_hazard_posterior(events, days, alpha: float = 1e-5, gamma: float = 1e-5) -> BaselinePosterior:
    """Gamma posterior of a constant hazard given event flags and follow-up days."""
    e = np.asarray(events, dtype=float)
    d = np.asarray(days, dtype=float)
    if e.shape != d.shape:
        raise ValueError("events and days must have the same length")
    if np.any(d < 0):
        raise ValueError("follow-up days must be nonnegative")
    if np.any((e != 0) & (e != 1)):
        raise ValueError("events must be 0/1")
    return BaselinePosterior(shape=float(e.sum()) + alpha, rate=float(d.sum()) + gamma,
                             alpha=alpha, gamma=gamma)


# ---------------------------------------------------------------------------
# Bayesian polynomial regression (Gibbs sampler)

@dataclass(frozen=True)
class LinRegPosterior:
    coef_draws: np.ndarray          # (n_draws, degree + 1), lowest order first
    sigma2_draws: np.ndarray
    prior_precision: float
    noise_shape: float
    noise_rate: float

    @property
    def coef_mean(self) -> np.ndarray:
        return self.coef_draws.mean(axis=0)

    @property
    def coef_sd(self) -> np.ndarray:
        return self.coef_draws.std(axis=0, ddof=1)

    @property
    def intercept(self) -> float:
        return float(self.coef_mean[0])

    @property
    def slope(self) -> float:
        return float(self.coef_mean[1])

    @property
    def sigma2_mean(self) -> float:
        return float(self.sigma2_draws.mean())


def bayes_linreg(h, v, degree: int = 1, prior_precision: float = 1e-5, noise_shape: float = 4e-2,
                 noise_rate: float = 4e-2, n_draws: int = 10_000, burn_in: int = 1_000,
                 seed: int = 0) -> LinRegPosterior:
    """Regress ``v`` on a polynomial in ``h`` by Gibbs sampling.

    Coefficients get independent N(0, 1/prior_precision) priors and the noise
    precision a Gamma(noise_shape, noise_rate) prior.
    """
    h = np.asarray(h, dtype=float)
    v = np.asarray(v, dtype=float)
    if h.shape != v.shape or h.ndim != 1:
        raise ValueError("h and v must be 1-d and of equal length")
    if len(h) < 3:
        raise ValueError("need at least 3 points")
    if degree not in (0, 1, 2):
        raise ValueError("degree must be 0, 1 or 2")
    X = np.vander(h, degree + 1, increasing=True)
    k = X.shape[1]
    XtX = X.T @ X
    Xtv = X.T @ v
    vtv = float(v @ v)
    n = len(v)
    rng = np.random.default_rng(seed)
    coef = np.linalg.lstsq(X, v, rcond=None)[0]
    shape_post = noise_shape + 0.5 * n
    eye = prior_precision * np.eye(k)
    coefs = np.empty((n_draws, k))
    sig2 = np.empty(n_draws)
    z_all = rng.standard_normal((n_draws + burn_in, k))
    g_all = rng.standard_gamma(shape_post, n_draws + burn_in)
    for it in range(n_draws + burn_in):
        ssr = max(vtv - 2.0 * coef @ Xtv + coef @ XtX @ coef, 0.0)
        tau = g_all[it] / (noise_rate + 0.5 * ssr)
        Q = tau * XtX + eye
        L = np.linalg.cholesky(Q)
        mean = np.linalg.solve(Q, tau * Xtv)
        # L L^T = Q, so solving L^T u = z gives u ~ N(0, Q^-1)
        coef = mean + np.linalg.solve(L.T, z_all[it])
        if it >= burn_in:
            coefs[it - burn_in] = coef
            sig2[it - burn_in] = 1.0 / tau
    return LinRegPosterior(coefs, sig2, prior_precision, noise_shape, noise_rate)


def poly_average(coefs, q: float, r: float):
    """Average of the polynomial(s) ``sum_j coefs[..., j] v**j`` over [q, r].

    ``coefs`` may be a single coefficient vector or a stack of posterior
    draws; degree at most 2.
    """
    if not r > q:
        raise ValueError("need r > q")
    c = np.asarray(coefs, dtype=float)
    if c.shape[-1] > 3:
        raise ValueError("polynomial degree must be at most 2")
    j = np.arange(c.shape[-1])
    weights = (r ** (j + 1) - q ** (j + 1)) / ((j + 1) * (r - q))
    out = c @ weights
    return float(out) if np.ndim(out) == 0 else out


def rho_stat(X, Y, R, ell: float = 0.05, max_excluded: float = 0.01) -> float:
    """Fraction of paired draws with |(X - Y) / R| < ell.

    Draws where R is zero are dropped; more than ``max_excluded`` of them is
    an error.
    """
    X, Y, R = np.broadcast_arrays(np.asarray(X, float), np.asarray(Y, float), np.asarray(R, float))
    if X.size == 0:
        raise ValueError("no draws")
    zero = R == 0
    if zero.mean() > max_excluded:
        raise ValueError(f"{zero.sum()} of {R.size} reference draws are zero")
    keep = ~zero
    return float(np.mean(np.abs((X[keep] - Y[keep]) / R[keep]) < ell))


def delta_stat(X, Y, ell: float = 0.01) -> float:
    """Fraction of paired draws with |X - Y| < ell."""
    X, Y = np.broadcast_arrays(np.asarray(X, float), np.asarray(Y, float))
    if X.size == 0:
        raise ValueError("no draws")
    return float(np.mean(np.abs(X - Y) < ell))


def is_significant(prob: float, level: float = 0.05) -> bool:
    return prob < level


# ---------------------------------------------------------------------------
# batch summaries

def group_record(fit) -> dict:
    """Normalise a fit object or its JSON to the group-coefficient fields."""
    rec = fit.to_json() if hasattr(fit, "to_json") else fit
    beta = rec.get("beta") or [None]
    se = rec.get("se") or [None]
    est = rec.get("estimable") or [False]
    return {
        "model": rec.get("model"),
        "beta": beta[0],
        "se": se[0],
        "estimable": bool(est[0]) and beta[0] is not None and se[0] is not None,
        "converged": bool(rec.get("converged", False)),
        "failed": bool(rec.get("failed", False)),
    }


def wald_reject(beta: float, se: float, level: float = 0.05) -> bool:
    return 2.0 * stats.norm.sf(abs(beta / se)) < level


@dataclass(frozen=True)
class ModelSummary:
    model: str
    n_datasets: int
    n_estimable: int
    n_non_estimable: int
    n_unconverged: int
    n_failed: int
    mean_beta: float
    rel_bias_pct: float
    emp_sd: float
    mean_se: float
    sd_se: float
    reject_rate: float

    @property
    def all_non_estimable(self) -> bool:
        return self.n_estimable == 0

    def mc_stderr(self, log_hr: float) -> dict:
        n = max(self.n_estimable, 1)
        scale = 100.0 / abs(log_hr) if log_hr != 0 else 100.0
        r = self.reject_rate
        return {
            "bias": scale * self.emp_sd / math.sqrt(n) if n > 1 else float("nan"),
            "se": self.sd_se / math.sqrt(n) if n > 1 else float("nan"),
            "reject": math.sqrt(r * (1 - r) / n) if self.n_estimable else float("nan"),
        }


@dataclass(frozen=True)
class BatchSummary:
    scenario_id: str
    hazard_ratio: float
    models: tuple[ModelSummary, ...] = field(default_factory=tuple)

    def __getitem__(self, model: str) -> ModelSummary:
        for m in self.models:
            if m.model == model:
                return m
        raise KeyError(model)

    def rows(self) -> list[dict]:
        return [{
            "scenario_id": self.scenario_id,
            "model": m.model,
            "n_estimable": m.n_estimable,
            "n_unconverged": m.n_unconverged + m.n_failed,
            "mean_beta": m.mean_beta,
            "rel_bias_pct": m.rel_bias_pct,
            "emp_sd": m.emp_sd,
            "mean_se": m.mean_se,
            "reject_rate": m.reject_rate,
        } for m in self.models]


def summarize_model(model: str, records, hazard_ratio: float, level: float = 0.05) -> ModelSummary:
    recs = [group_record(r) for r in records]
    n = len(recs)
    failed = sum(r["failed"] for r in recs)
    usable = [r for r in recs if not r["failed"]]
    non_est = sum(not r["estimable"] for r in usable)
    unconv = sum(r["estimable"] and not r["converged"] for r in usable)
    good = [r for r in usable if r["estimable"] and r["converged"]]
    nan = float("nan")
    if not good:
        return ModelSummary(model, n, 0, non_est, unconv, failed, nan, nan, nan, nan, nan, nan)
    beta = np.array([r["beta"] for r in good], dtype=float)
    se = np.array([r["se"] for r in good], dtype=float)
    truth = math.log(hazard_ratio)
    mean_beta = float(beta.mean())
    if hazard_ratio != 1.0:
        rel = 100.0 * (mean_beta - truth) / truth
    else:
        rel = 100.0 * mean_beta
    reject = np.array([wald_reject(b, s, level) for b, s in zip(beta, se)])
    ddof = 1 if len(good) > 1 else 0
    return ModelSummary(
        model=model, n_datasets=n, n_estimable=len(good), n_non_estimable=non_est,
        n_unconverged=unconv, n_failed=failed, mean_beta=mean_beta, rel_bias_pct=float(rel),
        emp_sd=float(beta.std(ddof=ddof)), mean_se=float(se.mean()), sd_se=float(se.std(ddof=ddof)),
        reject_rate=float(reject.mean()),
    )


def summarize_batch(fits_by_model: dict, hazard_ratio: float, scenario_id: str = "",
                    level: float = 0.05) -> BatchSummary:
    """Per-model bias, spread and rejection rate for one scenario.

    ``fits_by_model`` maps a model name to its per-dataset fits (objects or
    their JSON records).  Non-estimable, unconverged and failed fits are
    counted and left out of the means.
    """
    return BatchSummary(scenario_id, float(hazard_ratio), tuple(
        summarize_model(model, fits, hazard_ratio, level) for model, fits in fits_by_model.items()))


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None or not math.isfinite(float(x)):
        return "nan"
    return f"{float(x):.10g}"


def summaries_to_csv(summaries) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        for row in s.rows():
            writer.writerow([row["scenario_id"], row["model"]] + [_fmt(row[c]) for c in SUMMARY_COLUMNS[2:]])
    return buf.getvalue()
