"""Distribution Shift Inversion.

Out-of-distribution test samples are pushed toward the training
distribution before classification: each sample is mixed with Gaussian
noise and pulled back by diffusion models trained on the source domains,
and the base classifier's predictions on the results are combined.
"""
from .datasets import (Fig2Spec, GaussianMixtureSpec, LabeledDataset, gen_fig2_1d,
                       gen_mini_cdsprites, gen_multidomain_2d, load_dataset, save_dataset)
from .diffusion import (DiffusionModel, NoiseSchedule, StrideSampler, alpha_beta, forward_noise,
                        reverse_sample_from, train_diffusion, training_loss)
from .dsi import (DistributionShiftInversion, DsiConfig, DsiResult, EnsembleFn, EvalReport,
                  dsi_predict, ensemble, evaluate_dsi)
from .exceptions import ConfigError, DSIError, ShapeError, StageError, TrainingError
from .predictor import ConfidenceKind, LogitsRecord, Predictor, confidence, predict, train_predictor
from .theory import (AnalyticDiffusion, compute_F, compute_H, estimate_jsm, estimate_kl,
                     verify_theorem)

__version__ = "0.1.0"

__all__ = [
    "AnalyticDiffusion", "ConfidenceKind", "ConfigError", "DSIError", "DiffusionModel",
    "DistributionShiftInversion", "DsiConfig", "DsiResult", "EnsembleFn", "EvalReport",
    "Fig2Spec", "GaussianMixtureSpec", "LabeledDataset", "LogitsRecord", "NoiseSchedule",
    "Predictor", "ShapeError", "StageError", "StrideSampler", "TrainingError", "alpha_beta",
    "compute_F", "compute_H", "confidence", "dsi_predict", "ensemble", "estimate_jsm",
    "estimate_kl", "evaluate_dsi", "forward_noise", "gen_fig2_1d", "gen_mini_cdsprites",
    "gen_multidomain_2d", "load_dataset", "predict", "reverse_sample_from", "save_dataset",
    "train_diffusion", "train_predictor", "training_loss", "verify_theorem",
]
