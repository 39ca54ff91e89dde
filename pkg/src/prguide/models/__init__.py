"""Noise predictors: analytic Gaussian mixtures and a small MLP."""
from prguide.models.base import NoisePredictor
from prguide.models.conditions import Condition
from prguide.models.gmm import GaussianMixtureModel, gmm_epsilon, make_personalized
from prguide.models.mlp import (
    MlpDenoiser,
    denoising_loss,
    finetune_subject,
    mlp_epsilon,
    train_denoiser,
)
from prguide.models.serialization import load_model, model_from_bytes, model_to_bytes, save_model

__all__ = [
    "NoisePredictor",
    "Condition",
    "GaussianMixtureModel",
    "gmm_epsilon",
    "make_personalized",
    "MlpDenoiser",
    "mlp_epsilon",
    "train_denoiser",
    "finetune_subject",
    "denoising_loss",
    "save_model",
    "load_model",
    "model_to_bytes",
    "model_from_bytes",
]
