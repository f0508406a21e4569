"""Cox partial likelihood fitting: unadjusted, stratified (cph-S) and trial fixed effect (cph-F)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .dataset import PooledDataset, risk_sets_from_arrays, stratum_labels

MODES = ("unadjusted", "stratified", "fixed-effect")
TIES = ("breslow", "efron")
INFO_FLOOR = 1e-12
RUNAWAY = 500.0
# a Newton step this long at a stationary log-likelihood means the optimum is at infinity
RUNAWAY_STEP = 0.1
STALL_RATIO = 0.25


@dataclass(frozen=True)
class DesignSpec:
    mode: str = "unadjusted"
    ties: str = "breslow"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown design mode {self.mode!r}")
        if self.ties not in TIES:
            raise ValueError(f"unknown tie method {self.ties!r}")


def design_matrix(data: PooledDataset, design: DesignSpec):
    """Covariate matrix, stratum labels and column names for ``design``.

    Dataset covariates come first (the group column is column 0); the
    fixed-effect design appends indicators for trials 1..T-1.
    """
    X = np.asarray(data.covariates, dtype=float)
    names = ["group"] + [f"x{j}" for j in range(1, X.shape[1])]
    if design.mode == "fixed-effect":
        ind = (data.trial_id[:, None] == np.arange(1, data.n_trials)[None, :]).astype(float)
        X = np.hstack([X, ind])
        names += [f"trial{t}" for t in range(1, data.n_trials)]
    strata = stratum_labels(data, "by-trial" if design.mode == "stratified" else None)
    return X, strata, names


class CoxProblem:
    """Partial likelihood of one design, with risk sets precomputed.

    Every evaluation uses cumulative sums over subjects sorted by decreasing
    time within stratum, so a call costs O(n p^2).
    """

    def __init__(self, time, event, X, strata, ties="breslow"):
        self.X = np.asarray(X, dtype=float)
        self.n, self.p = self.X.shape
        self.ties = ties
        rs = risk_sets_from_arrays(np.asarray(time, float), np.asarray(event, bool), np.asarray(strata))
        self.risk_sets = rs
        order, starts, ends, ev_idx, ev_grp, d = [], [], [], [], [], []
        offset = 0
        g = 0
        for o, counts, evs in zip(rs.order, rs.n_at_risk, rs.event_ids):
            order.append(o)
            for k in range(len(counts)):
                starts.append(offset)
                ends.append(offset + counts[k])
                ev_idx.append(evs[k])
                ev_grp.append(np.full(len(evs[k]), g))
                d.append(len(evs[k]))
                g += 1
            offset += len(o)
        self.order = np.concatenate(order) if order else np.zeros(0, dtype=np.int64)
        self.starts = np.array(starts, dtype=np.int64)
        self.ends = np.array(ends, dtype=np.int64)
        self.ev_idx = np.concatenate(ev_idx) if ev_idx else np.zeros(0, dtype=np.int64)
        self.ev_grp = np.concatenate(ev_grp) if ev_grp else np.zeros(0, dtype=np.int64)
        self.d = np.array(d, dtype=float)
        self.n_groups = len(self.d)
        self.n_events = len(self.ev_idx)
        self.Xo = self.X[self.order]
        self.XXo = self.Xo[:, :, None] * self.Xo[:, None, :]
        self.x_event_sum = self.X[self.ev_idx].sum(axis=0)
        if ties == "efron" and self.n_groups:
            rows, frac = [], []
            for k, dk in enumerate(self.d.astype(int)):
                rows.extend([k] * dk)
                frac.extend(np.arange(dk) / dk)
            self.row_grp = np.array(rows, dtype=np.int64)
            self.row_frac = np.array(frac)
            self.row_wt = np.ones(len(rows))
        else:
            self.row_grp = np.arange(self.n_groups)
            self.row_frac = np.zeros(self.n_groups)
            self.row_wt = self.d

    def _risk_sum(self, values):
        cs = np.concatenate([np.zeros((1,) + values.shape[1:]), np.cumsum(values, axis=0)])
        return cs[self.ends] - cs[self.starts]

    def evaluate(self, beta, order: int = 2):
        """Log partial likelihood and, for ``order`` >= 1 / 2, its gradient and information."""
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.p,):
            raise ValueError(f"beta has shape {beta.shape}, expected ({self.p},)")
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta must be finite")
        if self.n_events == 0:
            return 0.0, np.zeros(self.p), np.zeros((self.p, self.p))
        eta = self.X @ beta
        r0, r1, r2, shift = self._sums(eta, order)
        wt = self.row_wt
        loglik = float(np.sum(eta[self.ev_idx]) - np.sum(wt * (np.log(r0) + shift)))
        if order < 1:
            return loglik, None, None
        m1 = r1 / r0[:, None]
        grad = self.x_event_sum - wt @ m1
        if order < 2:
            return loglik, grad, None
        info = np.einsum("k,kij->ij", wt / r0, r2) - (m1 * wt[:, None]).T @ m1
        return loglik, grad, 0.5 * (info + info.T)

    def _sums(self, eta, order):
        """Per-row risk sums of w, w x and w x x' scaled by exp(-shift).

        One global shift keeps the cumulative sums cheap; if a risk set then
        underflows the sums are redone exactly with a shift per risk set.
        """
        c = eta.max()
        out = self._shifted_sums(eta, order, np.full(self.n_groups, c))
        if np.all(out[0] > 1e-250):
            return out
        shifts = np.array([eta[self.order[a:b]].max() for a, b in zip(self.starts, self.ends)])
        return self._shifted_sums(eta, order, shifts, exact=True)

    def _shifted_sums(self, eta, order, shifts, exact=False):
        f, gi = self.row_frac, self.row_grp
        efron = self.ties == "efron"
        eo = eta[self.order]
        if exact:
            s0 = np.zeros(self.n_groups)
            s1 = np.zeros((self.n_groups, self.p))
            s2 = np.zeros((self.n_groups, self.p, self.p))
            for k, (a, b) in enumerate(zip(self.starts, self.ends)):
                wk = np.exp(eo[a:b] - shifts[k])
                s0[k] = wk.sum()
                if order >= 1:
                    s1[k] = wk @ self.Xo[a:b]
                if order >= 2:
                    s2[k] = np.einsum("i,ijk->jk", wk, self.XXo[a:b])
        else:
            wo = np.exp(eo - shifts[0])
            s0 = self._risk_sum(wo)
            s1 = self._risk_sum(wo[:, None] * self.Xo) if order >= 1 else None
            s2 = self._risk_sum(wo[:, None, None] * self.XXo) if order >= 2 else None
        we = np.exp(eta[self.ev_idx] - shifts[self.ev_grp]) if efron else None
        r0 = s0[gi]
        if efron:
            r0 = r0 - f * np.bincount(self.ev_grp, weights=we, minlength=self.n_groups)[gi]
        r1 = r2 = None
        if order >= 1:
            r1 = s1[gi]
            if efron:
                t1 = np.zeros((self.n_groups, self.p))
                np.add.at(t1, self.ev_grp, we[:, None] * self.X[self.ev_idx])
                r1 = r1 - f[:, None] * t1[gi]
        if order >= 2:
            r2 = s2[gi]
            if efron:
                xe = self.X[self.ev_idx]
                t2 = np.zeros((self.n_groups, self.p, self.p))
                np.add.at(t2, self.ev_grp, we[:, None, None] * xe[:, :, None] * xe[:, None, :])
                r2 = r2 - f[:, None, None] * t2[gi]
        return r0, r1, r2, shifts[gi]

    def loglik(self, beta) -> float:
        return self.evaluate(beta, order=0)[0]


def _problem(data, design, columns=None):
    X, strata, names = design_matrix(data, design)
    if columns is not None:
        X = X[:, columns]
    return CoxProblem(data.time, data.event, X, strata, design.ties), names


def log_partial_likelihood(data: PooledDataset, design: DesignSpec, beta) -> float:
    return _problem(data, design)[0].loglik(beta)


def score_and_information(data: PooledDataset, design: DesignSpec, beta):
    _, grad, info = _problem(data, design)[0].evaluate(beta)
    return grad, info


def detect_aliasing(data: PooledDataset, design: DesignSpec) -> set[int]:
    """Columns to drop so the within-stratum centred design has full column rank.

    Scans from the last column backward, dropping a column whenever it lies
    in the span of the columns still kept, so the group column survives
    unless it carries no information of its own.
    """
    X, strata, _ = design_matrix(data, design)
    if X.shape[0] == 0:
        return set(range(X.shape[1]))
    # only subjects that enter some risk set carry information
    used = np.zeros(len(X), dtype=bool)
    for s in np.unique(strata):
        in_s = strata == s
        ev = in_s & data.event
        if ev.any():
            used |= in_s & (data.time >= data.time[ev].min())
    Xc = X[used].copy()
    for s in np.unique(strata[used]):
        m = strata[used] == s
        Xc[m] -= Xc[m].mean(axis=0)
    scale = max(1.0, float(np.abs(Xc).max())) if Xc.size else 1.0

    def rank(cols):
        if not cols or Xc.shape[0] == 0:
            return 0
        return np.linalg.matrix_rank(Xc[:, cols], tol=1e-9 * scale * max(Xc.shape))

    keep = list(range(X.shape[1]))
    dropped = set()
    full = rank(keep)
    for j in reversed(range(X.shape[1])):
        if full == len(keep):
            break
        trial = [c for c in keep if c != j]
        if rank(trial) == full:
            keep = trial
            dropped.add(j)
    return dropped


@dataclass(frozen=True)
class StepFunction:
    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.where(idx >= 0, self.values[np.clip(idx, 0, None)] if len(self.values) else 0.0, 0.0)


@dataclass(frozen=True)
class FitResult:
    model: str
    beta: np.ndarray
    std_err: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    estimable: tuple[bool, ...]
    dropped_aliased: tuple[int, ...]
    column_names: tuple[str, ...] = ()
    max_abs_grad: float = float("nan")
    baseline_cumhaz: dict | None = field(default=None, compare=False)

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "beta": _floats(self.beta),
            "se": _floats(self.std_err),
            "loglik": _float(self.loglik),
            "converged": bool(self.converged),
            "estimable": [bool(e) for e in self.estimable],
            "dropped": [int(j) for j in self.dropped_aliased],
        }


def _float(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _floats(xs):
    return [_float(x) for x in xs]


def newton_solve(H, g):
    try:
        return np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, g, rcond=None)[0]


def maximize(fun, x0, tol=1e-9, max_iter=100, step_halving=True, ll_tol=1e-12):
    """Newton-Raphson ascent with step halving.

    ``fun(x, order)`` returns (value, gradient, negative Hessian).  Returns
    (x, value, grad, info, iterations, status) where status is one of
    "converged", "max_iter", "runaway".
    """
    x = np.array(x0, dtype=float)
    ll, g, H = fun(x, 2)
    status = "max_iter"
    it = 0
    while it < max_iter:
        if np.max(np.abs(g), initial=0.0) <= tol:
            status = "converged"
            break
        it += 1
        step = newton_solve(H, g)
        t = 1.0
        # steps whose gain is lost in roundoff of the loglik still count as ascent
        slack = 64 * np.finfo(float).eps * max(1.0, abs(ll))
        while True:
            cand = x + t * step
            ll_new = fun(cand, 0)[0]
            if ll_new >= ll - slack or not step_halving:
                break
            t *= 0.5
            if t < 1e-10:
                cand, ll_new = x, ll
                break
        moved = not np.array_equal(cand, x)
        change = ll_new - ll
        g_old = np.max(np.abs(g), initial=0.0)
        x = cand
        ll, g, H = fun(x, 2)
        if np.max(np.abs(x), initial=0.0) > RUNAWAY:
            status = "runaway"
            break
        # near a regular optimum the gradient shrinks quadratically, so the
        # loglik-change rule only stops iterations that have stalled
        stalled = np.max(np.abs(g), initial=0.0) > STALL_RATIO * g_old
        if (abs(change) <= ll_tol and stalled) or not moved:
            status = "converged"
            break
    return x, ll, g, H, it, status


def runaway_mask(x, g, H):
    """Coefficients diverging under a monotone likelihood.

    Either already past ``RUNAWAY`` or still owed a Newton step longer than
    ``RUNAWAY_STEP`` after the log-likelihood has stopped changing.
    """
    step = newton_solve(H, g) if len(x) else np.zeros(0)
    return (np.abs(x) > RUNAWAY) | ~np.isfinite(step) | (np.abs(step) > RUNAWAY_STEP)


def _standard_errors(H, candidates):
    """Inverse-information SEs over the columns in ``candidates``."""
    se = np.full(H.shape[0], np.nan)
    idx = np.flatnonzero(candidates)
    if len(idx):
        try:
            cov = linalg.inv(H[np.ix_(idx, idx)])
            var = np.diag(cov)
            se[idx] = np.sqrt(np.where(var > 0, var, np.nan))
        except (linalg.LinAlgError, ValueError):
            pass
    return se


MODEL_NAMES = {"unadjusted": "cph-U", "stratified": "cph-S", "fixed-effect": "cph-F"}


def newton_fit(data: PooledDataset, design: DesignSpec, tol=1e-9, max_iter=100,
               step_halving=True, model: str | None = None) -> FitResult:
    """Maximum partial likelihood fit from beta = 0.

    Aliased columns are dropped first and reported; a coefficient whose
    information is below 1e-12, or which diverges (see :func:`runaway_mask`),
    is flagged non-estimable and has no standard error.
    """
    X, strata, names = design_matrix(data, design)
    p = X.shape[1]
    dropped = detect_aliasing(data, design)
    cols = [j for j in range(p) if j not in dropped]
    beta = np.full(p, np.nan)
    se = np.full(p, np.nan)
    estimable = np.zeros(p, dtype=bool)
    label = model or MODEL_NAMES[design.mode]
    if not cols:
        return FitResult(label, beta, se, 0.0, 0, True, tuple(bool(e) for e in estimable), tuple(sorted(dropped)),
                         tuple(names), 0.0)
    prob = CoxProblem(data.time, data.event, X[:, cols], strata, design.ties)
    b, ll, g, H, it, status = maximize(lambda x, o: prob.evaluate(x, o), np.zeros(len(cols)),
                                       tol=tol, max_iter=max_iter, step_halving=step_halving)
    runaway = runaway_mask(b, g, H)
    ok = (np.diag(H) >= INFO_FLOOR) & ~runaway
    sub_se = _standard_errors(H, ok)
    ok &= np.isfinite(sub_se)
    beta[cols] = b
    se[cols] = np.where(ok, sub_se, np.nan)
    estimable[cols] = ok
    # a diverging column is flagged, not a failure of the whole fit
    converged = status != "max_iter"
    return FitResult(label, beta, se, ll, it, converged, tuple(bool(e) for e in estimable),
                     tuple(sorted(dropped)), tuple(names), float(np.max(np.abs(g), initial=0.0)))


def wald_test(fit, column: int = 0, null_value: float = 0.0) -> tuple[float, float]:
    """Two-sided Wald z test of ``beta[column] == null_value``."""
    if not fit.estimable[column]:
        raise ValueError(f"coefficient {column} is not estimable")
    z = (float(fit.beta[column]) - null_value) / float(fit.std_err[column])
    return z, float(2.0 * stats.norm.sf(abs(z)))


def breslow_baseline(fit: FitResult, data: PooledDataset, design: DesignSpec) -> dict[int, StepFunction]:
    """Breslow cumulative baseline hazard per stratum at the fitted coefficients.

    Non-estimable coefficients contribute nothing to the linear predictor.
    """
    X, strata, _ = design_matrix(data, design)
    beta = np.where(np.isfinite(fit.beta), fit.beta, 0.0)
    w = np.exp(X @ beta)
    rs = risk_sets_from_arrays(np.asarray(data.time), np.asarray(data.event), strata)
    out = {}
    for s, o, times, counts, evs in zip(rs.strata, rs.order, rs.event_times, rs.n_at_risk, rs.event_ids):
        cs = np.cumsum(w[o])
        inc = np.array([len(e) for e in evs], dtype=float) / cs[counts - 1] if len(times) else np.zeros(0)
        out[s] = StepFunction(np.asarray(times), np.cumsum(inc))
    return out
