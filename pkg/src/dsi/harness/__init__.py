"""Experiment harness: configs, pipelines, sweeps, ablations and plots."""
from .ablation import AblationReport, run_alignment_ablation
from .config import PRESETS, ExperimentConfig, preset
from .pipeline import Benchmark, make_benchmark, run_pipeline
from .plot import emit_plot
from .sweep import SweepSpec, interior_maximum, run_sweep
from .verify import run_theorem_check

__all__ = [
    "AblationReport", "Benchmark", "ExperimentConfig", "PRESETS", "SweepSpec", "emit_plot",
    "interior_maximum", "make_benchmark", "preset", "run_alignment_ablation", "run_pipeline",
    "run_sweep", "run_theorem_check",
]
