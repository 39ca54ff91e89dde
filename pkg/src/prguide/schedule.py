"""Cumulative noise schedules indexed by integer timestep ``t = 0..T``."""
import math
from dataclasses import dataclass

import numpy as np

from prguide.exceptions import ParameterError

__all__ = ["NoiseSchedule", "make_schedule", "SCHEDULE_KINDS"]

SCHEDULE_KINDS = ("cosine", "linear")
_MAX_BETA = 0.999


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """``alpha_bar[0] = 1`` (clean data) decreasing to ``alpha_bar[T]``."""

    alpha_bar: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        ab = np.array(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise ParameterError("alpha_bar needs at least two entries")
        if not np.all(np.isfinite(ab)) or ab[0] != 1.0:
            raise ParameterError("alpha_bar must be finite with alpha_bar[0] = 1")
        if np.any(np.diff(ab) >= 0) or ab[-1] <= 0:
            raise ParameterError("alpha_bar must be strictly decreasing within (0, 1]")
        ab.flags.writeable = False
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self):
        return self.alpha_bar.size - 1

    def __getitem__(self, t):
        return float(self.alpha_bar[t])


def _cosine_betas(steps, s=0.008):
    f = lambda u: math.cos((u + s) / (1 + s) * math.pi / 2) ** 2
    ab = [f(t / steps) / f(0.0) for t in range(steps + 1)]
    return np.array([min(1 - ab[t] / ab[t - 1], _MAX_BETA) for t in range(1, steps + 1)])


def _linear_betas(steps):
    # DDPM's 1e-4..0.02 range over 1000 steps, rescaled to `steps`.
    scale = 1000.0 / steps
    lo, hi = scale * 1e-4, scale * 0.02
    if steps == 1:
        return np.array([min(hi, _MAX_BETA)])
    return np.minimum(np.linspace(lo, hi, steps), _MAX_BETA)


def make_schedule(steps, kind="cosine"):
    """Build a ``steps``-transition schedule (``T = steps``).

    Betas are clipped at 0.999 so that ``alpha_bar[T]`` is tiny but positive.
    """
    if int(steps) != steps or steps < 1:
        raise ParameterError(f"steps must be a positive integer, got {steps}")
    steps = int(steps)
    if kind == "cosine":
        betas = _cosine_betas(steps)
    elif kind == "linear":
        betas = _linear_betas(steps)
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar=alpha_bar, kind=kind)
