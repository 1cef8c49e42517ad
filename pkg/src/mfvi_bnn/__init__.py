"""Tempered mean-field variational inference for wide two-layer Bayesian neural networks."""

from .data import Dataset, load_csv_regression, load_idx, synth_blobs
from .elbo import ElboBreakdown, TemperatureSchedule, elbo_estimate, resolve_eta
from .limit import f_tau_p, f_tilde, phi_bar, theorem3_gap_exact
from .model import Activation, Loss, forward, predictive_probabilities
from .trainer import TrainerConfig, TrainingDiverged, initialize_posterior, train
from .variational import FactorizedGaussianPrior, NeuronParams, VariationalPosterior, kl_total

__version__ = "0.1.0"

__all__ = [
    "Activation", "Dataset", "ElboBreakdown", "FactorizedGaussianPrior", "Loss", "NeuronParams",
    "TemperatureSchedule", "TrainerConfig", "TrainingDiverged", "VariationalPosterior",
    "elbo_estimate", "f_tau_p", "f_tilde", "forward", "initialize_posterior", "kl_total",
    "load_csv_regression", "load_idx", "phi_bar", "predictive_probabilities", "resolve_eta",
    "synth_blobs", "theorem3_gap_exact", "train",
]
