"""Numeric check of the prior-mismatch bound on the 1-D benchmark."""
from __future__ import annotations

import os

from ..exceptions import ConfigError
from ..nn import derive_seed
from ..theory import verify_theorem, write_theorem_csv
from .pipeline import prepare, stride_sampler


def run_theorem_check(cfg, alpha_grid=None):
    """Evaluate the bound for each α with the pipeline's trained model.

    Needs the ``fig2`` benchmark, whose source and target mixtures are known
    in closed form.  Writes ``results/theorem.csv`` and returns the reports.
    """
    if cfg.benchmark != "fig2":
        raise ConfigError("the bound check needs the fig2 benchmark (closed-form 1-D mixtures)")
    run, bench, _, models = prepare(cfg)
    opts = dict(cfg.theorem)
    grid = tuple(alpha_grid or opts.pop("alpha_grid", (0.9, 0.95, 0.99)))
    opts.pop("alpha_grid", None)
    reports = verify_theorem(models[0], bench.extras["source"], bench.extras["target"],
                             alpha_grid=grid, stride=stride_sampler(cfg, models),
                             seed=derive_seed(cfg.seed, 5), **opts)
    write_theorem_csv(reports, os.path.join(run.path("results"), "theorem.csv"))
    run.manifest["artifacts"]["results/theorem.csv"] = ""
    run.write_manifest()
    return reports
