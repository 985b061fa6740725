"""Single-parameter sweeps over DSI settings, repeated over seeds."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np

from ..dsi import ORIGINAL
from ..exceptions import ConfigError
from .pipeline import dsi_config, prepare, stage_eval
from .plot import emit_plot

log = logging.getLogger(__name__)

SWEEP_PARAMS = ("starting_time_s", "threshold_k", "ensemble_set")


def parse_ensemble_set(value):
    """``"original+0+2"`` or a list like ``["original", 0, 2]`` -> tuple."""
    if isinstance(value, str):
        value = [v for v in value.split("+") if v]
    members = []
    for v in value:
        if v in (ORIGINAL, "o", "C"):
            members.append(ORIGINAL)
        else:
            try:
                members.append(int(v))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad ensemble member {v!r}") from exc
    if not members:
        raise ConfigError("ensemble set must not be empty")
    return tuple(members)


def ensemble_label(members):
    return "+".join("C" if m == ORIGINAL else str(m) for m in members)


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple
    repetitions: int = 3

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ConfigError(f"unknown sweep parameter {self.param!r}; expected one of {SWEEP_PARAMS}")
        if not self.values:
            raise ConfigError("sweep value list must not be empty")
        if int(self.repetitions) < 1:
            raise ConfigError("need at least one repetition")
        if self.param == "ensemble_set":
            vals = tuple(parse_ensemble_set(v) for v in self.values)
        elif self.param == "starting_time_s":
            vals = tuple(int(v) for v in self.values)
        else:
            vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)

    def label(self, value):
        return ensemble_label(value) if self.param == "ensemble_set" else f"{value:g}"

    def dsi_changes(self, value):
        if self.param == "starting_time_s":
            return {"starting_times": [value]}
        if self.param == "threshold_k":
            return {"threshold": value}
        return {"ensemble_set": list(value)}


def repetition_config(cfg, r):
    """Repetition ``r`` reruns the pipeline with seed ``cfg.seed + r`` in its own directory."""
    seed = cfg.seed + r
    return cfg.replace(seed=seed, out=os.path.join(cfg.out, f"seed_{seed}"))


def run_sweep(cfg, sweep):
    """Evaluate every value on every repetition; write rows, summary and plot.

    Returns ``(rows, summary)``.  ``rows`` has one entry per (value,
    repetition); ``summary`` one per value with mean and std over the
    repetitions.  Files go to ``<out>/sweeps/<param>.csv``,
    ``<param>_summary.csv`` and ``<param>.svg``.
    """
    rows = []
    for r in range(sweep.repetitions):
        rcfg = repetition_config(cfg, r)
        run, bench, f, models = prepare(rcfg)
        for i, value in enumerate(sweep.values):
            vcfg = rcfg.with_dsi(**sweep.dsi_changes(value))
            report, res = stage_eval(run, bench, f, models, dsi_config(vcfg),
                                     tag=f"sweep_{sweep.param}_{i}")
            rows.append({
                "param": sweep.param, "value": sweep.label(value), "repetition": r,
                "seed": rcfg.seed, "base_accuracy": report.base_accuracy,
                "dsi_accuracy": report.dsi_accuracy,
                "preservation_ratio": report.preservation_ratio,
                "correction_ratio": report.correction_ratio,
                "mean_steps": float(np.mean(res.steps_consumed)),
            })
            log.info("%s=%s rep %d: base %.4f dsi %.4f", sweep.param, sweep.label(value), r,
                     report.base_accuracy, report.dsi_accuracy)

    summary = []
    for value in sweep.values:
        label = sweep.label(value)
        acc = np.array([row["dsi_accuracy"] for row in rows if row["value"] == label])
        base = np.array([row["base_accuracy"] for row in rows if row["value"] == label])
        summary.append({"value": label, "dsi_mean": float(acc.mean()), "dsi_std": float(acc.std()),
                        "base_mean": float(base.mean()), "n": len(acc)})

    out_dir = os.path.join(cfg.out, "sweeps")
    os.makedirs(out_dir, exist_ok=True)
    _write_rows(rows, os.path.join(out_dir, f"{sweep.param}.csv"))
    _write_rows(summary, os.path.join(out_dir, f"{sweep.param}_summary.csv"))

    categorical = sweep.param == "ensemble_set"
    xs = list(range(len(sweep.values))) if categorical else [float(v) for v in sweep.values]
    meta = {"title": f"accuracy vs {sweep.param}", "xlabel": sweep.param, "ylabel": "accuracy"}
    if categorical:
        meta["xticklabels"] = [s["value"] for s in summary]
    emit_plot([
        {"label": "DSI", "x": xs, "y": [s["dsi_mean"] for s in summary],
         "err": [s["dsi_std"] for s in summary]},
        {"label": "base", "x": xs, "y": [s["base_mean"] for s in summary]},
    ], meta, os.path.join(out_dir, f"{sweep.param}.svg"))
    return rows, summary


def _write_rows(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: f"{v:.12g}" if isinstance(v, float) else v for k, v in row.items()})


def interior_maximum(values):
    """True when the largest entry is strictly above both end points."""
    values = list(values)
    if len(values) < 3:
        return False
    best = int(np.argmax(values))
    return 0 < best < len(values) - 1 and values[best] > values[0] and values[best] > values[-1]
