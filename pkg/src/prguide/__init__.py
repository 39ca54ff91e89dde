"""Guided diffusion sampling with parallel rescaling of consistency guidance."""
from prguide.exceptions import (
    ConfigurationError,
    FormatError,
    InvalidScalesError,
    NumericalDivergenceError,
    ParameterError,
    ShapeError,
    UnknownConditionError,
)
from prguide.grid import LatentGrid, ScalarField, axpy, channel_vector_at, field_mean_std
from prguide.guidance import (
    GuidanceDecomposition,
    GuidanceScales,
    RescaleConstants,
    cfg_prediction,
    cg_prediction,
    consistency_guidance,
    consistency_p,
    decompose,
    decompose_guidance,
    parallel_rescale,
    pr_prediction,
    standardize_field,
    text_guidance,
)
from prguide.models import Condition, GaussianMixtureModel, MlpDenoiser, make_personalized
from prguide.sampler import GuidedDDIMSampler, SamplerTrace, ddim_step
from prguide.schedule import NoiseSchedule, make_schedule

__version__ = "0.1.0"
