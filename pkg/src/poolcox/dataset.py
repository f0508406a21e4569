"""Survival data containers, validation, risk sets and CSV/JSON round-tripping."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

GROUP_LABELS = ("A", "B")


@dataclass(frozen=True)
class Subject:
    time: float
    event: bool
    covariates: tuple[float, ...]
    trial_id: int


@dataclass(frozen=True, eq=False)
class PooledDataset:
    """Subjects pooled from ``n_trials`` trials, stored column-wise.

    ``trial_group`` holds one label ("A" or "B") per trial when the whole
    trial shares a group, or ``None`` when groups were assigned per subject.
    Arrays are made read-only on construction.
    """

    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    trial_id: np.ndarray
    n_trials: int
    trial_group: tuple[str, ...] | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        time = np.asarray(self.time, dtype=float)
        event = np.asarray(self.event, dtype=bool)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(len(time), -1) if len(time) else cov.reshape(0, 1)
        trial = np.asarray(self.trial_id, dtype=np.int64)
        for name, arr in (("time", time), ("event", event), ("covariates", cov), ("trial_id", trial)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.trial_group is not None:
            object.__setattr__(self, "trial_group", tuple(self.trial_group))

    @classmethod
    def from_subjects(cls, subjects: Sequence[Subject], n_trials: int,
                      trial_group=None, meta=None) -> "PooledDataset":
        width = len(subjects[0].covariates) if subjects else 1
        cov = np.array([s.covariates for s in subjects], dtype=float).reshape(len(subjects), width)
        return cls(
            time=np.array([s.time for s in subjects], dtype=float),
            event=np.array([s.event for s in subjects], dtype=bool),
            covariates=cov,
            trial_id=np.array([s.trial_id for s in subjects], dtype=np.int64),
            n_trials=n_trials,
            trial_group=trial_group,
            meta=dict(meta or {}),
        )

    def __len__(self) -> int:
        return len(self.time)

    @property
    def subjects(self) -> list[Subject]:
        return list(self.iter_subjects())

    def iter_subjects(self) -> Iterator[Subject]:
        for i in range(len(self)):
            yield Subject(float(self.time[i]), bool(self.event[i]),
                          tuple(float(x) for x in self.covariates[i]), int(self.trial_id[i]))

    @property
    def group(self) -> np.ndarray:
        """The group covariate (first covariate column; B=1, A=0)."""
        return self.covariates[:, 0]

    def has_both_groups(self) -> bool:
        g = self.group
        return len(g) > 0 and bool(np.any(g != g[0]))


def validate(dataset: PooledDataset) -> list[str]:
    """Return every invariant violation as a message; an empty list means ok."""
    problems = []
    n = len(dataset)
    if dataset.n_trials < 1:
        problems.append(f"n_trials must be >= 1, got {dataset.n_trials}")
    if not (len(dataset.event) == len(dataset.trial_id) == len(dataset.covariates) == n):
        problems.append("column lengths differ")
        return problems
    for i in range(n):
        t = dataset.time[i]
        if not np.isfinite(t):
            problems.append(f"subject {i}: non-finite time")
        elif t < 0:
            problems.append(f"subject {i}: negative time")
        tid = dataset.trial_id[i]
        if tid < 0 or tid >= dataset.n_trials:
            problems.append(f"subject {i}: trial id out of range ({tid} not in [0, {dataset.n_trials}))")
    if dataset.trial_group is not None:
        if len(dataset.trial_group) != dataset.n_trials:
            problems.append(f"trial_group has {len(dataset.trial_group)} entries, expected {dataset.n_trials}")
        elif n and dataset.meta.get("generator") == "simgen":
            codes = np.array([GROUP_LABELS.index(g) for g in dataset.trial_group], dtype=float)
            tid = np.clip(dataset.trial_id, 0, dataset.n_trials - 1)
            bad = np.flatnonzero(dataset.group != codes[tid])
            for i in bad:
                problems.append(f"subject {i}: group covariate disagrees with trial label")
    return problems


@dataclass(frozen=True, eq=False)
class RiskSetIndex:
    """Risk sets per stratum.

    For stratum ``s`` the subjects are kept in ``order[s]``, sorted by
    decreasing time, so the risk set at the ``k``-th event time is the prefix
    ``order[s][:n_at_risk[s][k]]``.  Event times are strictly increasing.
    """

    strata: tuple[int, ...]
    order: tuple[np.ndarray, ...]
    event_times: tuple[np.ndarray, ...]
    n_at_risk: tuple[np.ndarray, ...]
    event_ids: tuple[tuple[np.ndarray, ...], ...]

    def at_risk(self, stratum_pos: int, k: int) -> np.ndarray:
        return np.sort(self.order[stratum_pos][: self.n_at_risk[stratum_pos][k]])

    def events(self, stratum_pos: int, k: int) -> np.ndarray:
        return self.event_ids[stratum_pos][k]

    @property
    def n_event_times(self) -> int:
        return sum(len(t) for t in self.event_times)


def stratum_labels(dataset: PooledDataset, strata: str | None) -> np.ndarray:
    if strata in (None, "none"):
        return np.zeros(len(dataset), dtype=np.int64)
    if strata == "by-trial":
        return np.asarray(dataset.trial_id)
    raise ValueError(f"unknown strata option {strata!r}")


def risk_sets_from_arrays(time: np.ndarray, event: np.ndarray, labels: np.ndarray) -> RiskSetIndex:
    strata, order, ev_times, n_risk, ev_ids = [], [], [], [], []
    for s in np.unique(labels):
        ids = np.flatnonzero(labels == s)
        t = time[ids]
        o = ids[np.lexsort((ids, -t))]
        times_sorted = np.sort(t)
        et = np.unique(time[ids[event[ids]]])
        counts = len(ids) - np.searchsorted(times_sorted, et, side="left")
        evs = tuple(ids[(t == u) & event[ids]] for u in et)
        strata.append(int(s))
        order.append(o)
        ev_times.append(et)
        n_risk.append(counts.astype(np.int64))
        ev_ids.append(evs)
    return RiskSetIndex(tuple(strata), tuple(order), tuple(ev_times), tuple(n_risk), tuple(ev_ids))


def build_risk_sets(dataset: PooledDataset, strata: str | None = None) -> RiskSetIndex:
    """Group subjects into risk sets, optionally one stratum per trial."""
    return risk_sets_from_arrays(np.asarray(dataset.time), np.asarray(dataset.event),
                                 stratum_labels(dataset, strata))


# ---------------------------------------------------------------------------
# serialization

CSV_COLUMNS = ("trial_id", "group", "time", "event")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_dataset(dataset: PooledDataset, csv_path: str | Path) -> Path:
    """Write the subject CSV and a ``.json`` sidecar holding meta; returns the sidecar path."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for i in range(len(dataset)):
            writer.writerow([
                int(dataset.trial_id[i]),
                GROUP_LABELS[int(dataset.group[i])],
                repr(float(dataset.time[i])),
                int(dataset.event[i]),
            ])
    sidecar = csv_path.with_suffix(".json")
    payload = {
        "n_trials": dataset.n_trials,
        "trial_group": list(dataset.trial_group) if dataset.trial_group is not None else None,
        "meta": _jsonable(dataset.meta),
    }
    sidecar.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return sidecar


def read_dataset(csv_path: str | Path) -> PooledDataset:
    csv_path = Path(csv_path)
    trial, group, time, event = [], [], [], []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            trial.append(int(row["trial_id"]))
            group.append(float(GROUP_LABELS.index(row["group"])))
            time.append(float(row["time"]))
            event.append(row["event"] in ("1", "True", "true"))
    sidecar = csv_path.with_suffix(".json")
    info = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    n_trials = info.get("n_trials") or (max(trial) + 1 if trial else 1)
    return PooledDataset(
        time=np.array(time, dtype=float),
        event=np.array(event, dtype=bool),
        covariates=np.array(group, dtype=float).reshape(-1, 1),
        trial_id=np.array(trial, dtype=np.int64),
        n_trials=n_trials,
        trial_group=info.get("trial_group"),
        meta=info.get("meta", {}),
    )
