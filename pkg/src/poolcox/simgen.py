"""Simulated pooled-trial datasets.

Each trial is assigned wholly to group A or B, carries a log-normal frailty
multiplier, and its patients get exponential event and censoring times cut
off at an administrative horizon.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .dataset import GROUP_LABELS, PooledDataset, write_dataset


class ScenarioError(ValueError):
    """A scenario field is missing, mistyped or out of range."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


@dataclass(frozen=True)
class Scenario:
    n_trials: int = 10
    n_patients: int = 2000
    n_datasets: int = 1000
    unevenness: float = 0.5
    hazard_ratio: float = 1.0
    frailty_location: float = 0.0
    frailty_scale: float = 0.0
    contrast_fraction: float = 0.5
    event_rate: float = 0.15
    censor_rate: float = 0.25
    horizon: float = 1825.0
    master_seed: int = 0

    def __post_init__(self):
        checks = [
            ("n_trials", self.n_trials >= 1, "must be >= 1"),
            ("n_patients", self.n_patients >= self.n_trials, "must be >= n_trials"),
            ("n_datasets", self.n_datasets >= 1, "must be >= 1"),
            ("unevenness", 0.0 <= self.unevenness <= 1.0, "must lie in [0, 1]"),
            ("hazard_ratio", self.hazard_ratio > 0, "must be positive"),
            ("frailty_location", math.isfinite(self.frailty_location), "must be finite"),
            ("frailty_scale", self.frailty_scale >= 0, "must be nonnegative"),
            ("contrast_fraction", 0.0 <= self.contrast_fraction <= 1.0, "must lie in [0, 1]"),
            ("event_rate", 0.0 < self.event_rate < 1.0, "must lie in (0, 1)"),
            ("censor_rate", 0.0 < self.censor_rate < 1.0, "must lie in (0, 1)"),
            ("horizon", self.horizon > 0, "must be positive"),
            ("master_seed", self.master_seed >= 0, "must be a nonnegative integer"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ScenarioError(name, msg)

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        if not isinstance(raw, dict):
            raise ScenarioError("<root>", "scenario must be a JSON object")
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for key, value in raw.items():
            if key not in kinds:
                raise ScenarioError(key, "unknown field")
            want_int = kinds[key] == "int"
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ScenarioError(key, f"expected a number, got {value!r}")
            if want_int:
                if float(value) != int(value):
                    raise ScenarioError(key, f"expected an integer, got {value!r}")
                value = int(value)
            else:
                value = float(value)
            values[key] = value
        return cls(**values)

    @classmethod
    def from_json(cls, path: str | Path) -> "Scenario":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError("<file>", f"invalid JSON ({exc})") from None
        return cls.from_dict(raw)


@dataclass(frozen=True)
class TrialEffects:
    frailty: np.ndarray
    labels: tuple[str, ...]
    contrast: np.ndarray

    @property
    def both_groups(self) -> bool:
        return len(set(self.labels)) == 2


def solve_rate(cum_prob: float, horizon: float) -> float:
    """Exponential rate whose cumulative probability at ``horizon`` is ``cum_prob``."""
    if not 0.0 <= cum_prob < 1.0:
        raise ValueError(f"invalid rate: cumulative probability {cum_prob} must lie in [0, 1)")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    return -math.log1p(-cum_prob) / horizon


def assign_trial_groups(n_trials: int, p: float, rng: np.random.Generator) -> tuple[str, ...]:
    """Label each trial B with probability ``p``, otherwise A."""
    is_b = rng.random(n_trials) < p
    return tuple(GROUP_LABELS[int(b)] for b in is_b)


def draw_frailties(n_trials: int, location: float, scale: float, contrast_fraction: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-trial log-normal multipliers and the contrast flags.

    A random subset of ``floor(contrast_fraction * n_trials)`` trials has
    ``log(s) ~ N(location, scale)``; the rest have ``log(s) ~ N(0, scale)``.
    """
    if scale < 0:
        raise ValueError("frailty scale must be nonnegative")
    n_contrast = int(math.floor(contrast_fraction * n_trials + 1e-12))
    contrast = np.zeros(n_trials, dtype=bool)
    contrast[rng.permutation(n_trials)[:n_contrast]] = True
    z = rng.standard_normal(n_trials)
    log_s = np.where(contrast, location, 0.0) + scale * z
    return np.exp(log_s), contrast


def trial_sizes(n_patients: int, n_trials: int) -> np.ndarray:
    base, extra = divmod(n_patients, n_trials)
    sizes = np.full(n_trials, base, dtype=np.int64)
    sizes[:extra] += 1
    return sizes


def dataset_rng(master_seed: int, dataset_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(dataset_index)])


def _draw_times(rates: np.ndarray, scenario: Scenario, rng_event, rng_censor):
    n = len(rates)
    event_t = rng_event.exponential(1.0, n) / rates
    censor_rate = solve_rate(scenario.censor_rate, scenario.horizon)
    censor_t = rng_censor.exponential(1.0, n) / censor_rate
    observed = np.minimum(np.minimum(event_t, censor_t), scenario.horizon)
    event = (event_t <= censor_t) & (event_t <= scenario.horizon)
    return observed, event


def generate_effects(scenario: Scenario, dataset_index: int) -> tuple[TrialEffects, list[np.random.Generator]]:
    ss_groups, ss_frail, ss_event, ss_censor, ss_extra = dataset_rng(
        scenario.master_seed, dataset_index).spawn(5)
    labels = assign_trial_groups(scenario.n_trials, scenario.unevenness, np.random.default_rng(ss_groups))
    frailty, contrast = draw_frailties(scenario.n_trials, scenario.frailty_location,
                                       scenario.frailty_scale, scenario.contrast_fraction,
                                       np.random.default_rng(ss_frail))
    effects = TrialEffects(frailty=frailty, labels=labels, contrast=contrast)
    return effects, [np.random.default_rng(s) for s in (ss_event, ss_censor, ss_extra)]


def _assemble(scenario, dataset_index, effects, group, trial, rng_event, rng_censor, generator,
              trial_group):
    h0 = solve_rate(scenario.event_rate, scenario.horizon)
    rates = h0 * np.exp(math.log(scenario.hazard_ratio) * group) * effects.frailty[trial]
    time, event = _draw_times(rates, scenario, rng_event, rng_censor)
    meta = {
        "generator": generator,
        "scenario": scenario.to_dict(),
        "dataset_index": int(dataset_index),
        "frailty": effects.frailty.tolist(),
        "contrast": effects.contrast.tolist(),
        "labels": list(effects.labels),
        "both_groups": bool(np.any(group != group[0])) if len(group) else False,
    }
    return PooledDataset(time=time, event=event, covariates=group.reshape(-1, 1), trial_id=trial,
                         n_trials=scenario.n_trials, trial_group=trial_group, meta=meta)


def generate_dataset(scenario: Scenario, dataset_index: int) -> PooledDataset:
    """Dataset ``dataset_index`` of the scenario; a pure function of (master_seed, index)."""
    effects, (rng_event, rng_censor, _) = generate_effects(scenario, dataset_index)
    sizes = trial_sizes(scenario.n_patients, scenario.n_trials)
    trial = np.repeat(np.arange(scenario.n_trials), sizes)
    codes = np.array([GROUP_LABELS.index(g) for g in effects.labels], dtype=float)
    group = codes[trial]
    return _assemble(scenario, dataset_index, effects, group, trial, rng_event, rng_censor,
                     "simgen", effects.labels)


def generate_randomized_dataset(scenario: Scenario, dataset_index: int) -> PooledDataset:
    """Sanity variant: every patient is independently B with probability ``unevenness``.

    Trial frailties are drawn exactly as in :func:`generate_dataset`; only
    the group assignment differs, so the group covariate is not confounded
    with trial.
    """
    effects, (rng_event, rng_censor, rng_extra) = generate_effects(scenario, dataset_index)
    sizes = trial_sizes(scenario.n_patients, scenario.n_trials)
    trial = np.repeat(np.arange(scenario.n_trials), sizes)
    group = (rng_extra.random(len(trial)) < scenario.unevenness).astype(float)
    return _assemble(scenario, dataset_index, effects, group, trial, rng_event, rng_censor,
                     "simgen-randomized", None)


def generate_batch(scenario: Scenario) -> Iterator[PooledDataset]:
    for i in range(scenario.n_datasets):
        yield generate_dataset(scenario, i)


def write_batch(scenario: Scenario, out_dir: str | Path) -> Path:
    """Write every dataset as ``dataset_XXXXX.csv`` (+ sidecar) and ``batch_meta.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    single_label = 0
    for ds in generate_batch(scenario):
        write_dataset(ds, out_dir / f"dataset_{ds.meta['dataset_index']:05d}.csv")
        single_label += not ds.meta["both_groups"]
    meta = {
        "scenario": scenario.to_dict(),
        "n_datasets": scenario.n_datasets,
        "n_single_label": single_label,
        "event_rate_per_day": solve_rate(scenario.event_rate, scenario.horizon),
        "censor_rate_per_day": solve_rate(scenario.censor_rate, scenario.horizon),
    }
    path = out_dir / "batch_meta.json"
    path.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return path


def competing_event_probability(event_rate: float, censor_rate: float, horizon: float) -> float:
    """P(event observed by ``horizon``) with independent exponential event and censoring times."""
    total = event_rate + censor_rate
    return event_rate / total * -math.expm1(-total * horizon)
