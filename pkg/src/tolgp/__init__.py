"""Adaptive Gaussian-process surrogates with goal-oriented simulation tolerances.

Trains a GP surrogate of an expensive forward model by choosing evaluation
points and per-point simulation tolerances that keep the surrogate
posterior close to the true posterior, interleaved with MCMC sampling.
"""
from . import _backend
from .bayes import MeasurementModel, PriorBox, log_marginal_likelihood, log_plugin_likelihood, log_posterior
from .gp import GpModel, KernelParams, TrainingDesign, gp_fit, gp_predict, kernel_eval, optimize_hyperparameters, variance_derivative
from .models import ForwardModel, WorkLedger, evaluate_noisy, get_model, tolerance_of_work, work_of_tolerance

__version__ = "0.1.0"
BACKEND = _backend.name

__all__ = [
    "ForwardModel", "GpModel", "KernelParams", "MeasurementModel", "PriorBox", "TrainingDesign", "WorkLedger",
    "evaluate_noisy", "get_model", "gp_fit", "gp_predict", "kernel_eval", "log_marginal_likelihood",
    "log_plugin_likelihood", "log_posterior", "optimize_hyperparameters", "tolerance_of_work",
    "variance_derivative", "work_of_tolerance",
]
