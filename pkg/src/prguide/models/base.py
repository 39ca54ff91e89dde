"""Common interface for noise predictors."""
from abc import ABC, abstractmethod

import numpy as np

from prguide.exceptions import ShapeError
from prguide.grid import LatentGrid


class NoisePredictor(ABC):
    """Evaluates ``eps(x_t, t, condition)``.

    Subclasses implement :meth:`epsilon_arrays` on float arrays shaped
    ``(..., W, H, C)`` so that samplers can evaluate many latents at once.
    """

    @property
    @abstractmethod
    def grid_shape(self):
        """``(C, W, H)`` of the latents this predictor accepts."""

    @abstractmethod
    def epsilon_arrays(self, x, t, cond, schedule):
        """Noise prediction for a batch of latents in location-major arrays."""

    def _check_input(self, x):
        c, w, h = self.grid_shape
        if x.shape[-3:] != (w, h, c):
            raise ShapeError(
                f"latent of location shape {x.shape[-3:]} does not match model grid (W, H, C) = {(w, h, c)}"
            )

    def predict_epsilon(self, x_t, t, cond, schedule):
        """Noise prediction for one :class:`LatentGrid`."""
        if x_t.shape != tuple(self.grid_shape):
            raise ShapeError(f"latent shape {x_t.shape} does not match model shape {self.grid_shape}")
        eps = self.epsilon_arrays(np.asarray(x_t.locations), t, cond, schedule)
        return LatentGrid.from_locations(eps)
