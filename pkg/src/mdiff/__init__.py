"""Desk-scale toolkit for multivariate diffusion generative models."""

from .process import (DiffusionSpec, LearnableParams, Schedule, constant,
                      linear_beta, named_instance)
from .kernel import (Conditioning, GaussianKernel, KernelCache, DATA_ONLY,
                     FULL_STATE, sample, score_of_kernel, transition,
                     transition_batch, transition_ode)
from .score import AnalyticGaussianScore, MlpScore, NoisePredictionScore
from .elbo import (ElboBreakdown, dsm_integrand, estimate_elbo, elbo_sample,
                   ism_integrand, truncation_likelihood)
from .train import (TrainConfig, TrainDivergenceError, TrainState, fit,
                    train_step)
from .sampler import DivergenceError, SamplePath, denoise, generate, \
    reverse_sde_step

__all__ = [
    "DiffusionSpec", "LearnableParams", "Schedule", "constant", "linear_beta",
    "named_instance", "Conditioning", "GaussianKernel", "KernelCache",
    "DATA_ONLY", "FULL_STATE", "sample", "score_of_kernel", "transition",
    "transition_batch", "transition_ode", "AnalyticGaussianScore", "MlpScore",
    "NoisePredictionScore", "ElboBreakdown", "dsm_integrand", "estimate_elbo",
    "elbo_sample", "ism_integrand", "truncation_likelihood", "TrainConfig",
    "TrainDivergenceError", "TrainState", "fit", "train_step",
    "DivergenceError", "SamplePath", "denoise", "generate",
    "reverse_sde_step",
]

__version__ = "0.1.0"
