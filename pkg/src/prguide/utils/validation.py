"""Input validation helpers shared by estimators, metrics and the CLI."""
import numbers

import numpy as np

from prguide.exceptions import ParameterError, ShapeError
from prguide.grid import LatentGrid


def check_grids(grids, name="grids", allow_empty=False):
    """Stack a sequence of same-shape :class:`LatentGrid` objects.

    Returns
    -------
    data : ndarray of shape (n, C*W*H)
        Flat location-major rows.
    shape : tuple
        The common ``(C, W, H)``; None when empty and ``allow_empty``.
    """
    grids = list(grids)
    if not grids:
        if allow_empty:
            return np.empty((0, 0)), None
        raise ParameterError(f"{name} must not be empty")
    if not all(isinstance(g, LatentGrid) for g in grids):
        raise ParameterError(f"{name} must contain LatentGrid objects")
    shape = grids[0].shape
    for g in grids[1:]:
        if g.shape != shape:
            raise ShapeError(f"{name}: mixed shapes {shape} and {g.shape}")
    return np.stack([g.data for g in grids]), shape


def check_shape(shape):
    """Validate a ``(C, W, H)`` triple of positive integers."""
    try:
        shape = tuple(shape)
    except TypeError:
        raise ParameterError(f"shape must be a (C, W, H) triple, got {shape!r}") from None
    if len(shape) != 3 or not all(isinstance(s, numbers.Integral) and s >= 1 for s in shape):
        raise ParameterError(f"shape must be three positive integers, got {shape!r}")
    return tuple(int(s) for s in shape)


def check_seeds(seeds):
    seeds = [seeds] if isinstance(seeds, numbers.Integral) else list(seeds)
    if not seeds:
        raise ParameterError("at least one seed is required")
    for s in seeds:
        if not isinstance(s, numbers.Integral) or s < 0:
            raise ParameterError(f"seeds must be non-negative integers, got {s!r}")
    return [int(s) for s in seeds]
