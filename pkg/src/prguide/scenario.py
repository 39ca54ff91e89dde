"""Shipped toy personalization scenario built from analytic mixtures.

Channels are split in two halves.  The first half carries "identity"
(which object is drawn), the second half carries "style".  The base model
knows a generic object in two styles: label 0 is the stylized prompt, label
1 the photographic one.  Personalization adds the subject (its own identity
pattern, photographed, i.e. photo style) under label 0, mimicking a
fine-tune that memorized the reference photos' style along with the subject.
"""
from dataclasses import dataclass

import numpy as np

from prguide.grid import LatentGrid
from prguide.models.conditions import Condition
from prguide.models.gmm import GaussianMixtureModel, make_personalized
from prguide.utils.validation import check_shape

__all__ = ["Scenario", "toy_scenario", "STYLIZED", "PHOTO"]

STYLIZED = 0
PHOTO = 1


@dataclass(frozen=True)
class Scenario:
    base: object
    personalized: object
    condition: Condition
    references: tuple
    shape: tuple
    # Mixture the metrics are computed against; equals ``base`` for analytic scenarios.
    reference_model: object = None

    @property
    def metrics_model(self):
        return self.reference_model if self.reference_model is not None else self.base


def _pattern(rng, w, h, half, amplitude):
    return amplitude * rng.standard_normal((w, h, half))


def toy_scenario(
    shape=(4, 4, 4),
    seed=2025,
    amplitude=1.0,
    variance=0.1,
    subject_weight=0.5,
    identity_shift=0.5,
    n_references=5,
    style_jitter=0.25,
):
    """Build the analytic base / personalized pair and subject references.

    Parameters
    ----------
    shape : (C, W, H), C even
    seed : int
        Seeds the identity/style patterns and the reference draws.
    amplitude : float
        Per-entry scale of the patterns.
    variance : float
        Isotropic variance of every component.
    subject_weight : float
        Weight of the injected subject component.
    identity_shift : float
        How far (relative to ``amplitude``) the subject's identity pattern
        sits from the generic one.
    n_references : int
        Reference latents drawn from the subject component.
    style_jitter : float
        Scale (relative to ``amplitude``) of a pattern added to the
        subject's photo style, so the references are not shot in exactly
        the base model's photo style.
    """
    c, w, h = check_shape(shape)
    if c % 2:
        raise ValueError("toy scenario needs an even channel count")
    half = c // 2
    rng = np.random.default_rng(seed)
    generic, offset, stylized, photo = (_pattern(rng, w, h, half, amplitude) for _ in range(4))
    subject_id = generic + identity_shift * offset

    def grid(identity, style):
        return LatentGrid.from_locations(np.concatenate([identity, style], axis=-1))

    base = GaussianMixtureModel(
        means=[grid(generic, stylized), grid(generic, photo)],
        weights=[0.5, 0.5],
        variances=[variance, variance],
        labels=[STYLIZED, PHOTO],
    )
    jitter = _pattern(np.random.default_rng([seed, 1]), w, h, half, amplitude)
    subject_mean = grid(subject_id, photo + style_jitter * jitter)
    personalized = make_personalized(base, subject_mean, subject_weight, STYLIZED, subject=0)
    noise = rng.standard_normal((n_references, w, h, c))
    references = tuple(
        LatentGrid.from_locations(subject_mean.locations + np.sqrt(variance) * n) for n in noise
    )
    return Scenario(
        base=base,
        personalized=personalized,
        condition=Condition.subject_prompt(STYLIZED, 0),
        references=references,
        shape=(c, w, h),
    )
