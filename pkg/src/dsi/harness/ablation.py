"""How the noise-space alignment step affects label consistency.

Three ways of handing a test sample to a source diffusion model:

* ``total``: ignore the sample and start from pure noise at step ``T``;
* ``none``: feed the raw sample at step ``s`` as if it were already noised;
* ``dsi``: mix it with noise, ``β_s·x + α_s·ε``, and start at step ``s``.

The label consistency of a condition is the fraction of test samples whose
output is classified as the sample's true label.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from ..diffusion import alpha_beta, reverse_sample_from
from ..exceptions import ConfigError
from ..nn import derive_seed, rng_stream
from .pipeline import prepare, stride_sampler

CONDITIONS = ("total", "none", "dsi")


def align_and_sample(model, X, condition, s, stride, rng):
    """Outputs of ``model`` for the rows of ``X`` under one alignment condition."""
    X = np.asarray(X, dtype=np.float64)
    T = model.schedule.T
    if condition == "total":
        x_T = rng.standard_normal(X.shape)
        return model.from_internal(reverse_sample_from(model, x_T, T, stride, rng))
    if condition == "none":
        if s == 0:
            return X.copy()
        x_s = model.to_internal(X)
    elif condition == "dsi":
        a, b = alpha_beta(model.schedule, s)
        x_s = b * model.to_internal(X) + a * rng.standard_normal(X.shape)
    else:
        raise ConfigError(f"unknown alignment condition {condition!r}")
    return model.from_internal(reverse_sample_from(model, x_s, s, stride, rng))


def label_output_correlation(labels, outputs):
    """Pearson correlation of two label vectors; 0 when either is constant."""
    a = np.asarray(labels, dtype=np.float64)
    b = np.asarray(outputs, dtype=np.float64)
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


@dataclass
class AblationRow:
    condition: str
    start_step: int
    label_consistency: float
    correlation: float
    n: int


@dataclass
class AblationReport:
    rows: list

    def __getitem__(self, condition):
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    @property
    def mixing_gain(self):
        """DSI mixing minus no-alignment label consistency."""
        return self["dsi"].label_consistency - self["none"].label_consistency

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "start_step", "label_consistency", "correlation", "n"])
            for r in self.rows:
                w.writerow([r.condition, r.start_step, f"{r.label_consistency:.12g}",
                            f"{r.correlation:.12g}", r.n])


def run_alignment_ablation(cfg, start_step=None, n=None, domain=0):
    """Run the three alignment conditions on the held-out test set.

    Uses the pipeline's predictor and the diffusion model of ``domain``.
    ``start_step`` defaults to ``cfg.ablation["start_step"]``.
    """
    run, bench, f, models = prepare(cfg)
    if not 0 <= domain < len(models):
        raise ConfigError(f"no diffusion model for domain {domain}")
    model = models[domain]
    s = int(start_step if start_step is not None else cfg.ablation.get("start_step", 200))
    model.schedule.check_step(s)
    n = int(n if n is not None else cfg.ablation.get("n", len(bench.test)))
    X, y = bench.test.X[:n], bench.test.y[:n]
    stride = stride_sampler(cfg, models)
    rows = []
    for k, cond in enumerate(CONDITIONS):
        rng = rng_stream(derive_seed(cfg.seed, 4), k)
        step = model.schedule.T if cond == "total" else s
        out = align_and_sample(model, X, cond, s, stride, rng)
        pred = f.predict(out)
        rows.append(AblationRow(cond, step, float(np.mean(pred == y)),
                                label_output_correlation(y, pred), len(y)))
    report = AblationReport(rows)
    report.write_csv(os.path.join(run.path("results"), "ablation.csv"))
    run.manifest["artifacts"]["results/ablation.csv"] = ""
    run.write_manifest()
    return report
