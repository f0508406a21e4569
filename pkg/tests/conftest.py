import numpy as np
import pytest

from poolcox.dataset import PooledDataset


def make_dataset(time, event, x, trial=None, n_trials=None):
    time = np.asarray(time, dtype=float)
    x = np.asarray(x, dtype=float).reshape(len(time), -1)
    trial = np.zeros(len(time), dtype=int) if trial is None else np.asarray(trial)
    n_trials = n_trials or (int(trial.max()) + 1 if len(trial) else 1)
    return PooledDataset(time=time, event=np.asarray(event, bool), covariates=x, trial_id=trial,
                         n_trials=n_trials)


def random_small(rng, n=None, n_trials=1, n_cov=1, ties=False):
    n = n or int(rng.integers(4, 13))
    time = rng.integers(1, 5, n).astype(float) if ties else rng.exponential(1.0, n)
    event = rng.random(n) < 0.75
    event[0] = True
    x = rng.normal(size=(n, n_cov))
    trial = rng.integers(0, n_trials, n)
    return make_dataset(time, event, x, trial, n_trials)


def naive_loglik(time, event, x, beta):
    """Breslow log partial likelihood by explicit risk-set enumeration, vectorised over ``beta``."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    total = np.zeros_like(beta)
    for i in np.flatnonzero(event):
        risk = time >= time[i]
        total += x[i] * beta - np.log(np.exp(np.outer(beta, x[risk])).sum(axis=1))
    return total


@pytest.fixture
def two_subjects():
    return make_dataset([1.0, 2.0], [True, True], [[1.0], [0.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(20240615)


ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    """Store one acceptance verdict for the end-of-run report and echo it."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
