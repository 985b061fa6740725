"""Command-line entry point: ``dsi <subcommand> [options]``.

Every subcommand accepts ``--config`` (JSON) or ``--preset``; flags given on
the command line override the config.  Stages persist their artifacts under
``--out`` and later subcommands reuse them.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 1 other.
Set ``DSI_LOG`` to ``error``, ``info`` or ``debug`` to control logging.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from ..exceptions import ConfigError, StageError
from ..theory import theorem_summary
from .ablation import run_alignment_ablation
from .config import PRESETS, ExperimentConfig, parse_csv_list, preset
from .pipeline import RunDirectory, run_pipeline, stage_data, stage_diffusion, stage_predictor
from .sweep import SWEEP_PARAMS, SweepSpec, run_sweep
from .verify import run_theorem_check

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("dsi")


def _setup_logging():
    level = os.environ.get("DSI_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"DSI_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named preset (ignored with --config)")
    p.add_argument("--seed", type=int, help="run seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="worker threads for sample-level work")


def _dsi_flags(p):
    p.add_argument("--k", type=float, help="confidence threshold")
    p.add_argument("--starting-times", help="comma-separated starting steps, e.g. 100,200")
    p.add_argument("--stride", type=int, help="sampling steps K over the full schedule")


def build_parser():
    parser = argparse.ArgumentParser(prog="dsi", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("gen-data", "generate and store the benchmark data"),
                        ("train-predictor", "train the base classifier"),
                        ("train-diffusion", "train one diffusion model per training domain")]:
        _common(sub.add_parser(name, help=help_))
    for name, help_ in [("dsi-eval", "run DSI on the held-out domain (trains what is missing)"),
                        ("run", "alias of dsi-eval")]:
        p = sub.add_parser(name, help=help_)
        _common(p)
        _dsi_flags(p)
    p = sub.add_parser("sweep", help="single-parameter sweep over seeds")
    _common(p)
    _dsi_flags(p)
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True,
                   help="comma-separated values; ensemble sets as C+0+1 (C = original)")
    p.add_argument("--repetitions", type=int, default=3)
    p = sub.add_parser("verify-theorem", help="numeric check of the prior-mismatch bound")
    _common(p)
    p.add_argument("--alpha-grid", help="comma-separated α values in (0, 1)")
    p.add_argument("--stride", type=int)
    p = sub.add_parser("ablation", help="alignment ablation: total / none / DSI mixing")
    _common(p)
    p.add_argument("--start-step", type=int)
    p.add_argument("--stride", type=int)
    return parser


def resolve_config(args):
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    elif args.preset:
        cfg = preset(args.preset, seed=0)
    else:
        raise ConfigError("give --config or --preset")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    elif not args.config:
        changes["out"] = os.path.join("runs", f"{cfg.benchmark}-seed{changes.get('seed', cfg.seed)}")
    if args.workers is not None:
        changes["workers"] = args.workers
    if getattr(args, "stride", None) is not None:
        changes["stride"] = args.stride
    cfg = cfg.replace(**changes) if changes else cfg
    dsi = {}
    if getattr(args, "k", None) is not None:
        dsi["threshold"] = args.k
    if getattr(args, "starting_times", None):
        dsi["starting_times"] = parse_csv_list(args.starting_times, int, "--starting-times")
    return cfg.with_dsi(**dsi) if dsi else cfg


def _print_report(report):
    for k, v in report.summary().items():
        print(f"{k:20s} {v:.6g}" if isinstance(v, float) else f"{k:20s} {v}")


def dispatch(args):
    cfg = resolve_config(args)
    cmd = args.command
    if cmd in ("gen-data", "train-predictor", "train-diffusion"):
        run = RunDirectory(cfg)
        bench = stage_data(run)
        if cmd == "train-predictor":
            f = stage_predictor(run, bench)
            print(f"predictor written to {run.path('models', 'predictor.bin')} "
                  f"(train accuracy {f.train_accuracy_:.4f})" if hasattr(f, "train_accuracy_")
                  else f"predictor at {run.path('models', 'predictor.bin')}")
        elif cmd == "train-diffusion":
            models = stage_diffusion(run, bench)
            print(f"{len(models)} diffusion model(s) under {run.path('models')}")
        else:
            print(f"{len(bench.domains)} training domain(s), {len(bench.test)} test samples "
                  f"under {run.path('data')}")
    elif cmd in ("dsi-eval", "run"):
        res = run_pipeline(cfg)
        _print_report(res.report)
    elif cmd == "sweep":
        values = args.values.split(",")
        if args.param != "ensemble_set":
            values = parse_csv_list(args.values, float, "--values")
        _, summary = run_sweep(cfg, SweepSpec(args.param, tuple(values), args.repetitions))
        print(f"{'value':>14s} {'dsi_mean':>9s} {'dsi_std':>8s} {'base':>7s}")
        for s in summary:
            print(f"{s['value']:>14s} {s['dsi_mean']:9.4f} {s['dsi_std']:8.4f} {s['base_mean']:7.4f}")
    elif cmd == "verify-theorem":
        grid = parse_csv_list(args.alpha_grid, float, "--alpha-grid") if args.alpha_grid else None
        print(theorem_summary(run_theorem_check(cfg, grid)))
    elif cmd == "ablation":
        report = run_alignment_ablation(cfg, start_step=args.start_step)
        for r in report.rows:
            print(f"{r.condition:6s} s={r.start_step:5d} consistency {r.label_consistency:.4f} "
                  f"corr {r.correlation:+.4f}")
    return EXIT_OK


def _exit_code(exc):
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, ConfigError):
        return EXIT_CONFIG
    if isinstance(cause, FloatingPointError):
        return EXIT_NUMERIC
    return EXIT_OTHER


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        return dispatch(args)
    except (ConfigError, StageError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
