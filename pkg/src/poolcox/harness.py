"""Scenario sweeps: generate batches, fit every model, persist fits, write panel tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .coxfit import DesignSpec, newton_fit
from .frailty import fit_frailty
from .simgen import Scenario, ScenarioError, generate_dataset, generate_randomized_dataset

log = logging.getLogger(__name__)

AXES = ("n_trials", "unevenness", "frailty_location")
PANELS = ("bias", "se", "type1", "power")
PANEL_COLUMNS = ("axis_value", "model", "value", "mc_stderr")
GENERATORS = {"simgen": generate_dataset, "randomized": generate_randomized_dataset}


class UsageError(ValueError):
    pass


def fit_model(data, model: str):
    if model == "cph-S":
        return newton_fit(data, DesignSpec("stratified"), model=model)
    if model == "cph-F":
        return newton_fit(data, DesignSpec("fixed-effect"), model=model)
    if model == "cph-U":
        return newton_fit(data, DesignSpec("unadjusted"), model=model)
    if model == "cph-G":
        return fit_frailty(data, "gamma")
    if model == "cph-L":
        return fit_frailty(data, "log-normal")
    raise UsageError(f"unknown model {model!r}; choose from {', '.join(metrics.MODELS)}")


def fit_record(data, model: str) -> dict:
    """JSON record of one fit; a failure becomes a record flagged ``failed``."""
    try:
        return fit_model(data, model).to_json()
    except UsageError:
        raise
    except Exception as exc:  # a bad fit must not take the sweep down
        return {"model": model, "failed": True, "error": f"{type(exc).__name__}: {exc}",
                "converged": False, "estimable": [False], "beta": [None], "se": [None]}


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _run_task(task):
    scenario_dict, index, models, generator = task
    data = GENERATORS[generator](Scenario(**scenario_dict), index)
    return index, {m: fit_record(data, m) for m in models}


def run_single(scenario: Scenario, dataset_index: int, model: str, generator: str = "simgen") -> dict:
    if model not in metrics.MODELS and model != "cph-U":
        raise UsageError(f"unknown model {model!r}; choose from {', '.join(metrics.MODELS)}")
    return _run_task((scenario.to_dict(), dataset_index, (model,), generator))[1][model]


@dataclass(frozen=True)
class SweepSpec:
    base: Scenario
    axis: str
    values: tuple
    models: tuple = metrics.MODELS
    hazard_ratios: tuple = (1.0, 2.0)
    degree: dict = field(default_factory=lambda: {p: 1 for p in PANELS})
    generator: str = "simgen"
    ell_rho: float = 0.05
    ell_delta: float = 0.01

    def __post_init__(self):
        if self.axis not in AXES:
            raise UsageError(f"axis: must be one of {', '.join(AXES)}")
        if not self.values:
            raise UsageError("values: grid must be nonempty")
        bad = [m for m in self.models if m not in metrics.MODELS and m != "cph-U"]
        if bad or not self.models:
            raise UsageError(f"models: unknown or empty ({bad})")
        if not self.hazard_ratios:
            raise UsageError("hazard_ratios: must be nonempty")
        if self.generator not in GENERATORS:
            raise UsageError(f"generator: must be one of {', '.join(GENERATORS)}")
        for v in self.values:
            try:
                self.scenario(v, self.hazard_ratios[0])
            except ScenarioError as exc:
                raise ScenarioError(f"values ({self.axis})", str(exc)) from None

    def scenario(self, value, hazard_ratio) -> Scenario:
        value = int(value) if self.axis == "n_trials" else float(value)
        return self.base.replace(**{self.axis: value, "hazard_ratio": float(hazard_ratio)})

    def grid(self):
        for v in self.values:
            for hr in self.hazard_ratios:
                yield v, hr, scenario_id(self.axis, v, hr)

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(), "axis": self.axis, "values": list(self.values),
            "models": list(self.models), "hazard_ratios": list(self.hazard_ratios),
            "degree": dict(self.degree), "generator": self.generator,
            "ell_rho": self.ell_rho, "ell_delta": self.ell_delta,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SweepSpec":
        if "base" not in raw:
            # a bare scenario is a one-point sweep
            sc = Scenario.from_dict(raw)
            return cls(base=sc, axis="n_trials", values=(sc.n_trials,))
        known = {"base", "axis", "values", "models", "hazard_ratios", "degree", "generator",
                 "ell_rho", "ell_delta"}
        for key in raw:
            if key not in known:
                raise UsageError(f"{key}: unknown sweep field")
        try:
            base = Scenario.from_dict(raw["base"])
        except ScenarioError as exc:
            raise ScenarioError(f"base.{exc.field_name}", str(exc).split(": ", 1)[-1]) from None
        degree = raw.get("degree", 1)
        if isinstance(degree, int):
            degree = {p: degree for p in PANELS}
        elif isinstance(degree, dict):
            degree = {p: int(degree.get(p, 1)) for p in PANELS}
        else:
            raise UsageError("degree: must be an integer or an object keyed by panel")
        if any(d not in (0, 1, 2) for d in degree.values()):
            raise UsageError("degree: polynomial degree must be 0, 1 or 2")
        return cls(
            base=base,
            axis=raw.get("axis", "n_trials"),
            values=tuple(raw.get("values", ())),
            models=tuple(raw.get("models", metrics.MODELS)),
            hazard_ratios=tuple(float(h) for h in raw.get("hazard_ratios", (1.0, 2.0))),
            degree=degree,
            generator=raw.get("generator", "simgen"),
            ell_rho=float(raw.get("ell_rho", 0.05)),
            ell_delta=float(raw.get("ell_delta", 0.01)),
        )

    @classmethod
    def from_json(cls, path) -> "SweepSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError("<file>", f"invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ScenarioError("<root>", "expected a JSON object")
        return cls.from_dict(raw)


def scenario_id(axis: str, value, hazard_ratio) -> str:
    return f"{axis}={float(value):g}_hr={float(hazard_ratio):g}"


def run_sweep(spec: SweepSpec, out_dir, workers: int = 1, chunksize: int = 4) -> list[metrics.BatchSummary]:
    """Fit every model on every dataset of every grid point, then summarise.

    Per-dataset fit records go to ``out_dir/fits/<scenario_id>/``; the
    summary, panel CSVs and comparison JSON are written by
    :func:`summarize_outputs`.  Results do not depend on ``workers``.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise RuntimeError(f"output directory {out_dir} is not writable: {exc}") from None
    (out_dir / "sweep_spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=1) + "\n")

    tasks, where = [], []
    for value, hr, sid in spec.grid():
        sc = spec.scenario(value, hr)
        fit_dir = out_dir / "fits" / sid
        fit_dir.mkdir(parents=True, exist_ok=True)
        (fit_dir / "scenario.json").write_text(json.dumps(sc.to_dict(), sort_keys=True, indent=1) + "\n")
        for i in range(sc.n_datasets):
            tasks.append((sc.to_dict(), i, tuple(spec.models), spec.generator))
            where.append(fit_dir)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_run_task, tasks, chunksize=chunksize)
            _store(results, where)
    else:
        _store(map(_run_task, tasks), where)
    return summarize_outputs(out_dir)


def _store(results, where):
    for (index, records), fit_dir in zip(results, where):
        (fit_dir / f"fit_{index:05d}.json").write_text(
            dumps({"dataset_index": index, "fits": records}) + "\n")


def load_fits(fit_dir: Path, models) -> dict:
    by_model = {m: [] for m in models}
    for path in sorted(fit_dir.glob("fit_*.json")):
        rec = json.loads(path.read_text())
        for m in models:
            by_model[m].append(rec["fits"].get(m, {"model": m, "failed": True}))
    return by_model


def summarize_outputs(out_dir) -> list[metrics.BatchSummary]:
    """(Re)compute summary.csv, the panel CSVs and rho_delta.json from stored fits."""
    out_dir = Path(out_dir)
    spec = SweepSpec.from_dict(json.loads((out_dir / "sweep_spec.json").read_text()))
    summaries, fits = [], {}
    for value, hr, sid in spec.grid():
        by_model = load_fits(out_dir / "fits" / sid, spec.models)
        fits[(value, hr)] = by_model
        summaries.append(metrics.summarize_batch(by_model, hr, sid))
    (out_dir / "summary.csv").write_text(metrics.summaries_to_csv(summaries))
    panels = panel_tables(spec, summaries)
    for name, rows in panels.items():
        (out_dir / f"panel_{name}.csv").write_text(_panel_csv(rows))
    comparison = compare_models(spec, fits)
    (out_dir / "rho_delta.json").write_text(json.dumps(comparison, sort_keys=True, indent=1) + "\n")
    return summaries


def _panel_hr(spec: SweepSpec, panel: str):
    others = [h for h in spec.hazard_ratios if h != 1.0]
    if panel == "type1":
        return 1.0 if 1.0 in spec.hazard_ratios else None
    if panel == "power":
        return max(others) if others else None
    return max(others) if others else 1.0


def panel_tables(spec: SweepSpec, summaries) -> dict:
    lookup = {s.scenario_id: s for s in summaries}
    tables = {}
    for panel in PANELS:
        hr = _panel_hr(spec, panel)
        rows = []
        if hr is not None:
            for v in spec.values:
                s = lookup[scenario_id(spec.axis, v, hr)]
                for m in s.models:
                    err = m.mc_stderr(math.log(hr))
                    value, se = {
                        "bias": (m.rel_bias_pct, err["bias"]),
                        "se": (m.mean_se, err["se"]),
                        "type1": (m.reject_rate, err["reject"]),
                        "power": (m.reject_rate, err["reject"]),
                    }[panel]
                    rows.append((v, m.model, value, se))
        tables[panel] = rows
    return tables


def _panel_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PANEL_COLUMNS)
    for v, model, value, se in rows:
        writer.writerow([f"{float(v):g}", model, metrics._fmt(value), metrics._fmt(se)])
    return buf.getvalue()


def _per_dataset(panel: str, records, hr: float):
    out = []
    log_hr = math.log(hr)
    for rec in records:
        g = metrics.group_record(rec)
        if not (g["estimable"] and g["converged"]) or g["failed"]:
            continue
        if panel == "bias":
            out.append(100.0 * (g["beta"] - log_hr) / log_hr if hr != 1.0 else 100.0 * g["beta"])
        elif panel == "se":
            out.append(g["se"])
        else:
            out.append(float(metrics.wald_reject(g["beta"], g["se"])))
    return out


def compare_models(spec: SweepSpec, fits: dict, n_draws: int = 10_000) -> dict:
    """Posterior model comparisons per panel.

    Each model's per-dataset metric is regressed on the axis value, the
    fitted polynomial is averaged over the grid range, and every ordered
    pair of models is compared by rho (relative to the second model) and
    delta, pairing posterior draws by index.
    """
    q, r = float(min(spec.values)), float(max(spec.values))
    result = {"axis": spec.axis, "interval": [q, r], "ell_rho": spec.ell_rho,
              "ell_delta": spec.ell_delta, "significance_level": 0.05, "panels": {}}
    for pi, panel in enumerate(PANELS):
        hr = _panel_hr(spec, panel)
        entry = {"hazard_ratio": hr, "degree": spec.degree[panel], "sbar": {}, "comparisons": [],
                 "skipped": {}}
        result["panels"][panel] = entry
        if hr is None:
            continue
        draws = {}
        for mi, model in enumerate(spec.models):
            xs, ys = [], []
            for v in spec.values:
                vals = _per_dataset(panel, fits[(v, hr)][model], hr)
                xs += [float(v)] * len(vals)
                ys += vals
            n_unique = len(set(xs))
            degree = min(spec.degree[panel], max(n_unique - 1, 0))
            if len(ys) < 3:
                entry["skipped"][model] = "fewer than 3 estimable fits"
                continue
            seed = int(np.random.SeedSequence([spec.base.master_seed, pi, mi]).generate_state(1)[0])
            post = metrics.bayes_linreg(xs, ys, degree=degree, n_draws=n_draws, seed=seed)
            sbar = post.coef_draws[:, 0] if r == q else metrics.poly_average(post.coef_draws, q, r)
            draws[model] = sbar
            entry["sbar"][model] = {"mean": float(np.mean(sbar)), "sd": float(np.std(sbar, ddof=1)),
                                    "degree_used": degree}
        for x in draws:
            for y in draws:
                if x == y:
                    continue
                try:
                    rho = metrics.rho_stat(draws[x], draws[y], draws[y], spec.ell_rho)
                except ValueError:
                    rho = None
                delta = metrics.delta_stat(draws[x], draws[y], spec.ell_delta)
                entry["comparisons"].append({
                    "x": x, "y": y, "reference": y,
                    "rho": rho, "delta": delta,
                    "rho_significant": rho is not None and metrics.is_significant(rho),
                    "delta_significant": metrics.is_significant(delta),
                })
    return result


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
