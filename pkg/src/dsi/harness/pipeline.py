"""End-to-end pipeline with per-stage caching on disk.

A run directory looks like::

    <out>/manifest.json
    <out>/data/domain_<m>.dsd, test.dsd
    <out>/models/predictor.bin, diffusion_<m>.bin
    <out>/results/eval.csv, summary.csv

Each stage records a hash of the config entries it depends on in the
manifest.  A later run reuses a stage's files when the hash matches, so the
CLI subcommands can be run one at a time and expensive training is done
once.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from ..datasets import (Fig2Spec, LabeledDataset, ShiftSpec, gen_fig2_1d, gen_mini_cdsprites,
                        gen_multidomain_2d, load_dataset, save_dataset)
from ..diffusion import DiffusionModel, StrideSampler
from ..dsi import DsiConfig, evaluate_dsi
from ..exceptions import ConfigError, DSIError, StageError
from ..nn import derive_seed
from ..predictor import Predictor

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"

# stream keys for the seeds derived from the run seed
_PREDICTOR_KEY, _DIFFUSION_KEY, _DSI_KEY = 1, 2, 3


@dataclass
class Benchmark:
    """Training domains, the held-out test set and generator side products."""

    name: str
    domains: list
    test: LabeledDataset
    extras: dict = field(default_factory=dict)

    @property
    def train(self):
        return LabeledDataset.concat(self.domains)


def _tuples(params):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}


def make_benchmark(cfg):
    params = dict(cfg.benchmark_params)
    try:
        if cfg.benchmark == "fig2":
            bad = set(params) - set(Fig2Spec.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown fig2 parameters: {sorted(bad)}")
            train, test, source, target, source_test = gen_fig2_1d(cfg.seed, **_tuples(params))
            return Benchmark("fig2", [train], test,
                             {"source": source, "target": target, "source_test": source_test})
        if cfg.benchmark == "grid2d":
            if "shift" in params:
                params["shift"] = ShiftSpec(**_tuples(params["shift"]))
            domains, held, specs = gen_multidomain_2d(seed=cfg.seed, **params)
            return Benchmark("grid2d", domains, held, {"specs": specs})
        data = gen_mini_cdsprites(seed=cfg.seed, **params)
        return Benchmark("cdsprites-mini", data.domains, data.test,
                         {"test_colors": data.test_colors, "grid": data.grid})
    except TypeError as exc:
        raise ConfigError(f"bad parameters for benchmark {cfg.benchmark!r}: {exc}") from exc


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunDirectory:
    """Paths, manifest bookkeeping and stage caching for one run."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.root = cfg.out
        for sub in ("data", "models", "results"):
            os.makedirs(os.path.join(self.root, sub), exist_ok=True)
        self.manifest = self._read_manifest()

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def _read_manifest(self):
        try:
            with open(self.path(MANIFEST)) as fh:
                return json.load(fh)
        except (FileNotFoundError, json.JSONDecodeError):
            return {"stages": {}, "artifacts": {}}

    def write_manifest(self):
        m = self.manifest
        m["config_hash"] = self.cfg.digest()
        m["seed"] = self.cfg.seed
        m["benchmark"] = self.cfg.benchmark
        m["artifacts"] = {rel: _sha256(self.path(rel)) for rel in sorted(m.get("artifacts", {}))
                          if os.path.exists(self.path(rel))}
        with open(self.path(MANIFEST), "w") as fh:
            json.dump(m, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def stage_key(self, stage):
        cfg = self.cfg
        data = cfg.digest("benchmark", "benchmark_params", "seed")
        keys = {
            "data": data,
            "predictor": data + cfg.digest("predictor"),
            "diffusion": data + cfg.digest("diffusion"),
        }
        return hashlib.sha256(keys[stage].encode()).hexdigest()

    def cached(self, stage, files):
        ok = self.manifest["stages"].get(stage) == self.stage_key(stage)
        return ok and all(os.path.exists(self.path(f)) for f in files)

    def record(self, stage, files):
        self.manifest["stages"][stage] = self.stage_key(stage)
        for f in files:
            self.manifest["artifacts"][f] = ""
        self.write_manifest()


def _run_stage(name, fn):
    try:
        return fn()
    except StageError:
        raise
    except TypeError as exc:
        # unknown keyword arguments in the config end up here
        raise StageError(name, ConfigError(str(exc))) from exc
    except (DSIError, FloatingPointError, ValueError, OSError) as exc:
        raise StageError(name, exc) from exc


# -- stages --------------------------------------------------------------------

def stage_data(run):
    """Generate (or reload) the benchmark and persist it as DSD1 files."""
    cfg = run.cfg

    def go():
        bench = make_benchmark(cfg)
        files = [f"data/domain_{m}.dsd" for m in range(len(bench.domains))] + ["data/test.dsd"]
        if not run.cached("data", files):
            for m, ds in enumerate(bench.domains):
                save_dataset(ds, run.path(f"data/domain_{m}.dsd"))
            save_dataset(bench.test, run.path("data/test.dsd"))
            run.record("data", files)
        else:
            # generators are deterministic; check the persisted copy agrees
            stored = load_dataset(run.path("data/test.dsd"))
            if not np.array_equal(stored.X, bench.test.X):
                raise ConfigError("persisted test set differs from the generated one")
        return bench

    return _run_stage("data", go)


def stage_predictor(run, bench):
    cfg = run.cfg
    rel = "models/predictor.bin"

    def go():
        if run.cached("predictor", [rel]):
            log.info("reusing %s", rel)
            return Predictor.load(run.path(rel))
        params = dict(cfg.predictor)
        params["hidden"] = tuple(params.get("hidden", (64,)))
        train = bench.train
        f = Predictor(random_state=derive_seed(cfg.seed, _PREDICTOR_KEY), **params)
        log.info("training predictor on %d samples", len(train))
        f.fit(train.X, train.y)
        f.save(run.path(rel))
        run.record("predictor", [rel])
        return f

    return _run_stage("predictor", go)


def stage_diffusion(run, bench):
    cfg = run.cfg
    files = [f"models/diffusion_{m}.bin" for m in range(len(bench.domains))]

    def go():
        if run.cached("diffusion", files):
            log.info("reusing %d diffusion models", len(files))
            return [DiffusionModel.load(run.path(f)) for f in files]
        params = dict(cfg.diffusion)
        if "hidden" in params:
            params["hidden"] = tuple(params["hidden"])
        models = []
        for m, ds in enumerate(bench.domains):
            log.info("training diffusion model for domain %d (%d samples)", m, len(ds))
            g = DiffusionModel(domain_id=str(m), random_state=derive_seed(cfg.seed, _DIFFUSION_KEY, m),
                               **params)
            g.fit(ds.X)
            g.save(run.path(files[m]))
            models.append(g)
        run.record("diffusion", files)
        return models

    return _run_stage("diffusion", go)


def dsi_config(cfg):
    try:
        return DsiConfig(**cfg.dsi)
    except TypeError as exc:
        raise ConfigError(f"bad dsi config: {exc}") from exc


def stride_sampler(cfg, models):
    T = models[0].schedule.T if models else 1000
    return StrideSampler(T, min(int(cfg.stride), T))


def dsi_seed(cfg):
    return derive_seed(cfg.seed, _DSI_KEY)


def write_summary(report, path, extra=None):
    rows = list(report.summary().items()) + list((extra or {}).items())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, f"{v:.12g}" if isinstance(v, float) else v])


def stage_eval(run, bench, f, models, dsi_cfg=None, tag="eval"):
    cfg = run.cfg

    def go():
        dcfg = dsi_cfg or dsi_config(cfg)
        report, result = evaluate_dsi(bench.test, f, models, dcfg, stride_sampler(cfg, models),
                                      dsi_seed(cfg), cfg.workers)
        if not report.partition_ok():
            raise DSIError("evaluation counts do not partition the test set")
        report.write_csv(run.path(f"results/{tag}.csv"))
        write_summary(report, run.path(f"results/{tag}_summary.csv"))
        for rel in (f"results/{tag}.csv", f"results/{tag}_summary.csv"):
            run.manifest["artifacts"][rel] = ""
        run.write_manifest()
        return report, result

    return _run_stage("dsi-eval", go)


@dataclass
class PipelineResult:
    report: object
    result: object
    benchmark: Benchmark
    predictor: Predictor
    models: list
    run: RunDirectory


def prepare(cfg):
    """Data, predictor and diffusion stages; returns the pieces for evaluation."""
    run = RunDirectory(cfg)
    bench = stage_data(run)
    f = stage_predictor(run, bench)
    models = stage_diffusion(run, bench)
    return run, bench, f, models


def run_pipeline(cfg):
    """Generate data, train every model, evaluate DSI on the held-out domain.

    Artifacts land under ``cfg.out``; stages whose inputs did not change are
    loaded from disk instead of recomputed.  A failing stage raises
    :class:`~dsi.exceptions.StageError` after the manifest has been updated
    with whatever finished before it.
    """
    run, bench, f, models = prepare(cfg)
    report, result = stage_eval(run, bench, f, models)
    log.info("base accuracy %.4f, DSI accuracy %.4f", report.base_accuracy, report.dsi_accuracy)
    return PipelineResult(report, result, bench, f, models, run)
