"""Guidance algebra: CFG, consistency guidance and parallel rescaling.

Every public function takes and returns :class:`~prguide.grid.LatentGrid` /
:class:`~prguide.grid.ScalarField` objects.  The ``*_arrays`` kernels do the
same math on float arrays shaped ``(..., W, H, C)``; leading axes index
independent samples, and spatial statistics are never pooled across them.
"""
import math
from dataclasses import dataclass

import numpy as np

from prguide.exceptions import InvalidScalesError, ParameterError, ShapeError
from prguide.grid import LatentGrid, ScalarField

__all__ = [
    "GuidanceScales",
    "RescaleConstants",
    "GuidanceDecomposition",
    "text_guidance",
    "cfg_prediction",
    "consistency_guidance",
    "cg_prediction",
    "decompose",
    "consistency_p",
    "standardize_field",
    "parallel_rescale",
    "pr_prediction",
    "decompose_guidance",
    "MODES",
]

MODES = ("CFG", "CG", "PR")


@dataclass(frozen=True)
class GuidanceScales:
    omega_text: float = 7.5
    omega_cons: float = 3.0

    def __post_init__(self):
        for name in ("omega_text", "omega_cons"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvalidScalesError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class RescaleConstants:
    eps_std: float = 1e-8
    eps_proj: float = 1e-12

    def __post_init__(self):
        for name in ("eps_std", "eps_proj"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ParameterError(f"{name} must be finite and > 0, got {v}")


@dataclass(frozen=True)
class GuidanceDecomposition:
    """Per-step guidance bundle for one latent."""

    g_text: LatentGrid
    g_cons: LatentGrid
    g_par: LatentGrid
    g_perp: LatentGrid
    cp: ScalarField
    cp_mean: float
    cp_std: float


def _same_shape(*grids):
    shape = grids[0].shape
    for g in grids[1:]:
        if g.shape != shape:
            raise ShapeError(f"shape mismatch: {shape} vs {g.shape}")


def _require_text_scale(scales):
    if scales.omega_text == 0:
        raise InvalidScalesError("omega_text = 0 leaves Consistency_p undefined")


# -- array kernels ----------------------------------------------------------


def projection_coefficient_arrays(g_cons, g_text, eps_proj):
    """``<g_cons, g_text> / |g_text|^2`` per location.

    Locations with ``|g_text|^2 <= eps_proj`` count as having no text
    direction and get exactly 0.  The guard is a threshold rather than an
    added regularizer so the projection stays exact (and ``g_perp``
    orthogonal) wherever ``g_text`` is small but meaningful.
    """
    num = np.sum(g_cons * g_text, axis=-1)
    den = np.sum(g_text * g_text, axis=-1)
    live = den > eps_proj
    return np.where(live, num / np.where(live, den, 1.0), 0.0)


def decompose_arrays(g_cons, g_text, eps_proj):
    alpha = projection_coefficient_arrays(g_cons, g_text, eps_proj)
    g_par = alpha[..., None] * g_text
    return g_par, g_cons - g_par, alpha


def standardize_arrays(cp, eps_std):
    """Standardize over the trailing (W, H) axes, one latent at a time.

    Constant fields map to exact zeros (the rounded mean of a constant need
    not equal the constant).
    """
    mu = cp.mean(axis=(-2, -1), keepdims=True)
    flat = np.all(cp == cp[..., :1, :1], axis=(-2, -1), keepdims=True)
    dev = np.where(flat, 0.0, cp - mu)
    sigma = np.sqrt(np.mean(dev * dev, axis=(-2, -1), keepdims=True))
    return dev / (sigma + eps_std), mu[..., 0, 0], sigma[..., 0, 0]


def combine_arrays(mode, eps_uncond, g_text, g_cons, scales, consts):
    """Guided noise prediction for ``mode`` plus the decomposition pieces.

    Returns ``(eps_final, parts)`` where ``parts`` holds ``g_par``,
    ``g_perp``, ``cp``, ``z`` (standardized cp), ``cp_mean`` and ``cp_std``.
    ``g_cons`` may be None in CFG mode.
    """
    wt, wc = scales.omega_text, scales.omega_cons
    eps = eps_uncond + wt * g_text
    if g_cons is None:
        g_cons = np.zeros_like(g_text)
    g_par, g_perp, alpha = decompose_arrays(g_cons, g_text, consts.eps_proj)
    if wt > 0:
        cp = (wc / wt) * alpha
    elif mode == "PR":
        raise InvalidScalesError("omega_text = 0 leaves Consistency_p undefined")
    else:
        cp = np.zeros_like(alpha)
    z, mu, sigma = standardize_arrays(cp, consts.eps_std)
    if mode == "CG":
        eps = eps + wc * g_cons
    elif mode == "PR":
        eps = eps + wc * g_perp + wt * (z[..., None] * g_text)
    elif mode != "CFG":
        raise ParameterError(f"unknown guidance mode {mode!r}; expected one of {MODES}")
    parts = dict(g_par=g_par, g_perp=g_perp, cp=cp, z=z, cp_mean=mu, cp_std=sigma)
    return eps, parts


# -- grid-level operations --------------------------------------------------


def text_guidance(eps_cond, eps_uncond):
    """``eps_phi(x_t|c) - eps_phi(x_t|empty)``."""
    _same_shape(eps_cond, eps_uncond)
    return eps_cond - eps_uncond


def cfg_prediction(eps_uncond, g_text, scales):
    _same_shape(eps_uncond, g_text)
    return LatentGrid.from_locations(eps_uncond.locations + scales.omega_text * g_text.locations)


def consistency_guidance(eps_theta_c, eps_phi_c):
    """``eps_theta(x_t|c) - eps_phi(x_t|c)``."""
    _same_shape(eps_theta_c, eps_phi_c)
    return eps_theta_c - eps_phi_c


def cg_prediction(eps_uncond, g_text, g_cons, scales):
    _same_shape(eps_uncond, g_text, g_cons)
    eps = eps_uncond.locations + scales.omega_text * g_text.locations
    return LatentGrid.from_locations(eps + scales.omega_cons * g_cons.locations)


def decompose(g_cons, g_text, consts=RescaleConstants()):
    """Split ``g_cons`` into parts parallel and orthogonal to ``g_text``.

    The projection is taken per location over the channel vector.  Where
    ``|g_text|^2 <= eps_proj`` the parallel part is zero.

    Returns
    -------
    (g_par, g_perp) : tuple of LatentGrid
    """
    _same_shape(g_cons, g_text)
    g_par, g_perp, _ = decompose_arrays(g_cons.locations, g_text.locations, consts.eps_proj)
    return LatentGrid.from_locations(g_par), LatentGrid.from_locations(g_perp)


def consistency_p(g_cons, g_text, scales, consts=RescaleConstants()):
    """Per-location interference ratio of the parallel consistency term.

    Computed as ``(omega_cons / omega_text) * alpha`` with ``alpha`` the
    projection coefficient; this equals the channel mean of
    ``omega_cons * g_par / (omega_text * g_text)`` wherever every channel of
    ``g_text`` is nonzero, and stays defined where some are not.
    """
    _same_shape(g_cons, g_text)
    _require_text_scale(scales)
    alpha = projection_coefficient_arrays(g_cons.locations, g_text.locations, consts.eps_proj)
    return ScalarField((scales.omega_cons / scales.omega_text) * alpha)


def standardize_field(cp, eps_std=1e-8):
    z, _, _ = standardize_arrays(cp.values, eps_std)
    return ScalarField(z)


def decompose_guidance(g_text, g_cons, scales, consts=RescaleConstants()):
    """Build the full :class:`GuidanceDecomposition` for one step."""
    _same_shape(g_text, g_cons)
    _require_text_scale(scales)
    g_par, g_perp, alpha = decompose_arrays(g_cons.locations, g_text.locations, consts.eps_proj)
    cp = (scales.omega_cons / scales.omega_text) * alpha
    _, mu, sigma = standardize_arrays(cp, consts.eps_std)
    return GuidanceDecomposition(
        g_text=g_text,
        g_cons=g_cons,
        g_par=LatentGrid.from_locations(g_par),
        g_perp=LatentGrid.from_locations(g_perp),
        cp=ScalarField(cp),
        cp_mean=float(mu),
        cp_std=float(sigma),
    )


def parallel_rescale(decomp, scales, consts=RescaleConstants()):
    """Rescaled consistency guidance ``g_PR``.

    ``g_perp + (omega_text / omega_cons) * standardized(cp) * g_text``; with
    ``omega_cons = 0`` the rescaled term is only meaningful in the combined
    prediction (see :func:`pr_prediction`) and ``g_perp`` is returned.
    """
    _require_text_scale(scales)
    if scales.omega_cons == 0:
        return decomp.g_perp
    z, _, _ = standardize_arrays(decomp.cp.values, consts.eps_std)
    ratio = scales.omega_text / scales.omega_cons
    out = decomp.g_perp.locations + ratio * (z[..., None] * decomp.g_text.locations)
    return LatentGrid.from_locations(out)


def pr_prediction(eps_uncond, g_text, decomp, scales, consts=RescaleConstants()):
    """Final parallel-rescaled noise prediction.

    Evaluated in expanded form,
    ``eps_uncond + w_t g_text + w_c g_perp + w_t (standardized(cp) * g_text)``,
    so no ``omega_text / omega_cons`` factor is ever formed.
    """
    _same_shape(eps_uncond, g_text, decomp.g_perp)
    _require_text_scale(scales)
    z, _, _ = standardize_arrays(decomp.cp.values, consts.eps_std)
    wt, wc = scales.omega_text, scales.omega_cons
    eps = eps_uncond.locations + wt * g_text.locations
    eps = eps + wc * decomp.g_perp.locations + wt * (z[..., None] * g_text.locations)
    return LatentGrid.from_locations(eps)
