"""Dense C x W x H latent fields and per-location scalar fields.

Storage is location-major: the C channel values of one spatial location are
contiguous, locations are ordered with ``h`` varying fastest, then ``w``.
The flat ``data`` buffer and the binary format both use this order.  All
arithmetic is float64.
"""
import struct
from pathlib import Path

import numpy as np

from prguide.exceptions import FormatError, ShapeError

__all__ = [
    "LatentGrid",
    "ScalarField",
    "channel_vector_at",
    "axpy",
    "field_mean_std",
    "grid_to_bytes",
    "grid_from_bytes",
    "save_grid",
    "load_grid",
]

GRID_MAGIC = b"LGRD"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64, copy=True, order="C")
    if not np.all(np.isfinite(arr)):
        raise ValueError("grid entries must be finite")
    arr.flags.writeable = False
    return arr


class LatentGrid:
    """Immutable C x W x H real field.

    Parameters
    ----------
    chw : array-like of shape (C, W, H)
        Channel-first values. Use :meth:`from_flat` for a location-major
        buffer or :meth:`from_locations` for a (W, H, C) array.
    """

    __slots__ = ("_loc",)

    def __init__(self, chw):
        chw = np.asarray(chw, dtype=np.float64)
        if chw.ndim != 3 or min(chw.shape) < 1:
            raise ShapeError(f"expected a non-empty (C, W, H) array, got shape {chw.shape}")
        self._loc = _frozen(np.moveaxis(chw, 0, -1))

    @classmethod
    def from_locations(cls, values):
        """Build from a (W, H, C) array of per-location channel vectors."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ShapeError(f"expected a non-empty (W, H, C) array, got shape {values.shape}")
        grid = cls.__new__(cls)
        grid._loc = _frozen(values)
        return grid

    @classmethod
    def from_flat(cls, data, channels, width, height):
        data = np.asarray(data, dtype=np.float64).ravel()
        if data.size != channels * width * height:
            raise ShapeError(
                f"flat buffer has {data.size} entries, expected {channels * width * height}"
            )
        return cls.from_locations(data.reshape(width, height, channels))

    @classmethod
    def zeros(cls, channels, width, height):
        return cls.from_locations(np.zeros((width, height, channels)))

    @property
    def channels(self):
        return self._loc.shape[2]

    @property
    def width(self):
        return self._loc.shape[0]

    @property
    def height(self):
        return self._loc.shape[1]

    @property
    def shape(self):
        """``(C, W, H)``."""
        return (self.channels, self.width, self.height)

    @property
    def size(self):
        return self._loc.size

    @property
    def locations(self):
        """Read-only (W, H, C) view of per-location channel vectors."""
        return self._loc

    @property
    def data(self):
        """Read-only flat buffer in location-major order."""
        return self._loc.reshape(-1)

    def to_chw(self):
        return np.ascontiguousarray(np.moveaxis(self._loc, -1, 0))

    def get(self, c, w, h):
        return float(self._loc[w, h, c])

    def _check(self, other):
        if not isinstance(other, LatentGrid):
            return NotImplemented
        if other.shape != self.shape:
            raise ShapeError(f"shape mismatch: {self.shape} vs {other.shape}")
        return other

    def __add__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return LatentGrid.from_locations(self._loc + other._loc)

    def __sub__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return LatentGrid.from_locations(self._loc - other._loc)

    def __mul__(self, a):
        if isinstance(a, LatentGrid):
            return NotImplemented
        return LatentGrid.from_locations(float(a) * self._loc)

    __rmul__ = __mul__

    def __neg__(self):
        return LatentGrid.from_locations(-self._loc)

    def __eq__(self, other):
        if not isinstance(other, LatentGrid):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._loc, other._loc)

    __hash__ = None

    def allclose(self, other, atol=1e-12, rtol=0.0):
        self._check(other)
        return bool(np.allclose(self._loc, other._loc, atol=atol, rtol=rtol))

    def __repr__(self):
        return f"LatentGrid(C={self.channels}, W={self.width}, H={self.height})"


class ScalarField:
    """Immutable W x H real field (one value per spatial location)."""

    __slots__ = ("_values",)

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2 or values.size < 1:
            raise ShapeError(f"expected a non-empty (W, H) array, got shape {values.shape}")
        self._values = _frozen(values)

    @property
    def width(self):
        return self._values.shape[0]

    @property
    def height(self):
        return self._values.shape[1]

    @property
    def shape(self):
        return self._values.shape

    @property
    def values(self):
        return self._values

    def __eq__(self, other):
        if not isinstance(other, ScalarField):
            return NotImplemented
        return np.array_equal(self._values, other._values)

    __hash__ = None

    def __repr__(self):
        return f"ScalarField(W={self.width}, H={self.height})"


def channel_vector_at(grid, w, h):
    """Return the C channel values at location ``(w, h)`` as a new array."""
    if not (0 <= w < grid.width and 0 <= h < grid.height):
        raise IndexError(f"location ({w}, {h}) outside {grid.width}x{grid.height} grid")
    return grid.locations[w, h].copy()


def axpy(a, x, y):
    """Return ``a * x + y``."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    return LatentGrid.from_locations(a * x.locations + y.locations)


def field_mean_std(f):
    """Population mean and standard deviation over all locations."""
    v = f.values if isinstance(f, ScalarField) else np.asarray(f, dtype=np.float64)
    mean = v.mean()
    return float(mean), float(np.sqrt(np.mean((v - mean) ** 2)))


def grid_to_bytes(grid):
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, grid.channels, grid.width, grid.height)
    return header + grid.data.astype("<f8").tobytes()


def grid_from_bytes(buf):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated grid header")
    magic, version, c, w, h = _HEADER.unpack_from(buf)
    if magic != GRID_MAGIC:
        raise FormatError(f"bad grid magic {magic!r}")
    if version != GRID_VERSION:
        raise FormatError(f"unsupported grid version {version}")
    n = c * w * h
    if len(buf) != _HEADER.size + 8 * n:
        raise FormatError(f"grid payload has {len(buf) - _HEADER.size} bytes, expected {8 * n}")
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=_HEADER.size)
    return LatentGrid.from_flat(data, c, w, h)


def save_grid(grid, path):
    Path(path).write_bytes(grid_to_bytes(grid))


def load_grid(path):
    return grid_from_bytes(Path(path).read_bytes())
