"""Variational Bayesian MLPs trained with Bayes-by-Backprop.

Mean-field Gaussian and radial weight posteriors, hybrid deterministic /
variational layer stacks, Monte Carlo posterior prediction and a small
reverse-mode autodiff engine that drives it all.
"""
from .autodiff import Tape, Tensor
from .distributions import (
    DiagonalGaussian,
    IsotropicGaussianPrior,
    NoiseDraw,
    RadialPosterior,
    gaussian_log_prob,
    gaussian_sample_reparam,
    kl_diag_vs_isotropic,
    radial_kl_estimate,
    radial_sample,
)
from .layers import DenseDeterministic, DenseVariational, prior_unit_diagnostic
from .model_builder import LayerSpec, Model, ModelSpec, build_model, hybrid_split, load_spec
from .objective import ElboConfig, ElboEstimate, negative_elbo
from .predictive import (
    PredictiveSummary,
    calibration_metrics,
    format_prediction_report,
    posterior_predictive,
    predict_batch,
)
from .trainer import TrainConfig, TrainTrace, bbb_step, train

__version__ = "0.1.0"
