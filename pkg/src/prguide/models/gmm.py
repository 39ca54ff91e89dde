"""Isotropic Gaussian-mixture data model with a closed-form noise predictor."""
import numpy as np
from scipy.special import logsumexp

from prguide.exceptions import ParameterError, ShapeError, UnknownConditionError
from prguide.grid import LatentGrid
from prguide.models.base import NoisePredictor
from prguide.models.conditions import Condition

__all__ = ["GaussianMixtureModel", "gmm_epsilon", "make_personalized", "NO_SUBJECT"]

NO_SUBJECT = -1


class GaussianMixtureModel(NoisePredictor):
    """Mixture of isotropic Gaussians over C x W x H latents.

    Each component has a weight, a mean grid, a scalar variance, a prompt
    label and optionally a subject id.  A condition selects components:

    * ``Unconditional``: every component;
    * ``Prompt(l)``: non-subject components labelled ``l``;
    * ``SubjectPrompt(l, s)``: components labelled ``l`` that are either
      non-subject or belong to subject ``s``.

    Selected weights are renormalized.  The noisy marginal at level
    ``alpha_bar`` is again an isotropic mixture with means
    ``sqrt(alpha_bar) * mu_k`` and variances ``alpha_bar * s_k^2 + 1 - alpha_bar``,
    so the optimal noise prediction is available in closed form.

    Parameters
    ----------
    means : sequence of LatentGrid
    weights, variances : sequence of float
    labels : sequence of int
    subjects : sequence of int, optional
        Subject id per component, ``-1`` for ordinary components.
    """

    def __init__(self, means, weights, variances, labels, subjects=None):
        means = tuple(means)
        if not means:
            raise ParameterError("a mixture needs at least one component")
        shape = means[0].shape
        if any(m.shape != shape for m in means):
            raise ShapeError("all component means must share one shape")
        k = len(means)
        weights = np.asarray(weights, dtype=np.float64)
        variances = np.asarray(variances, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        subjects = (
            np.full(k, NO_SUBJECT, dtype=np.int64)
            if subjects is None
            else np.asarray(subjects, dtype=np.int64)
        )
        for name, arr in (("weights", weights), ("variances", variances), ("labels", labels), ("subjects", subjects)):
            if arr.shape != (k,):
                raise ParameterError(f"{name} must have one entry per component ({k})")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ParameterError("weights must be positive and sum to 1")
        if np.any(~np.isfinite(variances)) or np.any(variances <= 0):
            raise ParameterError("variances must be finite and positive")
        if np.any(labels < 0) or np.any(subjects < NO_SUBJECT):
            raise ParameterError("labels must be >= 0 and subject ids >= -1")
        self.means = means
        self.weights = weights
        self.variances = variances
        self.labels = labels
        self.subjects = subjects
        self._mu = np.stack([m.data for m in means])
        for arr in (self.weights, self.variances, self.labels, self.subjects, self._mu):
            arr.flags.writeable = False

    @property
    def grid_shape(self):
        return self.means[0].shape

    @property
    def n_components(self):
        return len(self.means)

    def select(self, cond):
        """Indices of the components ``cond`` selects."""
        if cond.label is None:
            mask = np.ones(self.n_components, dtype=bool)
        elif cond.subject is None:
            mask = (self.labels == cond.label) & (self.subjects == NO_SUBJECT)
        else:
            mask = (self.labels == cond.label) & (
                (self.subjects == NO_SUBJECT) | (self.subjects == cond.subject)
            )
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            raise UnknownConditionError(f"{cond} selects no mixture component")
        return idx

    def _log_terms(self, x, alpha_bar, cond):
        """Per-component log-densities and residuals; ``x`` is ``(..., D)``."""
        idx = self.select(cond)
        w = self.weights[idx]
        log_w = np.log(w / w.sum())
        var = alpha_bar * self.variances[idx] + (1.0 - alpha_bar)
        diff = x[..., None, :] - np.sqrt(alpha_bar) * self._mu[idx]
        sq = np.einsum("...kd,...kd->...k", diff, diff)
        d = x.shape[-1]
        log_terms = log_w - 0.5 * d * np.log(2 * np.pi * var) - sq / (2 * var)
        return log_terms, diff, var

    def log_density_arrays(self, x, cond, alpha_bar=1.0):
        """Log-density of latents ``x`` (``(..., W, H, C)``) under the
        conditional marginal at noise level ``alpha_bar`` (1 = clean data)."""
        self._check_input(x)
        flat = x.reshape(*x.shape[:-3], -1)
        log_terms, _, _ = self._log_terms(flat, alpha_bar, cond)
        return logsumexp(log_terms, axis=-1)

    def log_density(self, x, cond, alpha_bar=1.0):
        return float(self.log_density_arrays(np.asarray(x.locations), cond, alpha_bar))

    def epsilon_arrays(self, x, t, cond, schedule):
        self._check_input(x)
        alpha_bar = schedule.alpha_bar[t]
        flat = x.reshape(*x.shape[:-3], -1)
        log_terms, diff, var = self._log_terms(flat, alpha_bar, cond)
        resp = np.exp(log_terms - logsumexp(log_terms, axis=-1, keepdims=True))
        # eps = -sqrt(1 - a) * grad log p,  grad log p = -sum_k r_k diff_k / v_k
        eps = np.sqrt(1.0 - alpha_bar) * np.einsum("...k,...kd->...d", resp / var, diff)
        return eps.reshape(x.shape)

    def sample_clean(self, n, cond, rng):
        """Draw ``n`` clean latents from the conditional mixture as a
        ``(n, W, H, C)`` array."""
        idx = self.select(cond)
        w = self.weights[idx] / self.weights[idx].sum()
        comp = idx[rng.choice(idx.size, size=n, p=w)]
        noise = rng.standard_normal((n, self._mu.shape[1]))
        x = self._mu[comp] + np.sqrt(self.variances[comp])[:, None] * noise
        c, wd, h = self.grid_shape
        return x.reshape(n, wd, h, c)

    def __repr__(self):
        return f"GaussianMixtureModel(components={self.n_components}, shape={self.grid_shape})"


def gmm_epsilon(model, x_t, t, cond, schedule):
    """Exact noise prediction ``-sqrt(1 - alpha_bar_t) * grad log p_t(x_t | cond)``."""
    return model.predict_epsilon(x_t, t, cond, schedule)


def make_personalized(base, subject_mean, subject_weight, attach_label, subject=0, subject_variance=None):
    """Copy ``base`` and inject a subject component.

    Existing weights are scaled by ``1 - subject_weight``.  The new component
    is labelled ``attach_label`` and flagged as ``subject``; its variance
    defaults to the mean variance of the label's existing components.
    """
    if not (0.0 < subject_weight < 1.0):
        raise ParameterError(f"subject_weight must lie in (0, 1), got {subject_weight}")
    owned = base.labels == attach_label
    if not owned.any():
        raise ParameterError(f"label {attach_label} is not registered in the base model")
    if subject < 0:
        raise ParameterError("subject id must be >= 0")
    if subject_mean.shape != base.grid_shape:
        raise ShapeError(f"subject mean shape {subject_mean.shape} != model shape {base.grid_shape}")
    if subject_variance is None:
        subject_variance = float(base.variances[owned].mean())
    weights = np.append(base.weights * (1.0 - subject_weight), subject_weight)
    weights /= weights.sum()
    return GaussianMixtureModel(
        means=base.means + (subject_mean,),
        weights=weights,
        variances=np.append(base.variances, subject_variance),
        labels=np.append(base.labels, attach_label),
        subjects=np.append(base.subjects, subject),
    )
