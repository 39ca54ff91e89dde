"""Per-timestep Consistency_p statistics and likelihood-based sample metrics."""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from prguide.exceptions import FormatError, ParameterError, ShapeError
from prguide.utils.validation import check_grids

__all__ = [
    "StatsRecord",
    "ConsistencyStats",
    "MetricReport",
    "collect_cp_stats",
    "prompt_alignment_score",
    "identity_score",
    "export_stats_csv",
    "read_stats_csv",
    "render_histogram_image",
]


@dataclass
class StatsRecord:
    t: int
    mu: float
    sigma: float
    counts: np.ndarray  # underflow, n_bins interior bins, overflow

    def __eq__(self, other):
        if not isinstance(other, StatsRecord):
            return NotImplemented
        return (
            self.t == other.t
            and self.mu == other.mu
            and self.sigma == other.sigma
            and np.array_equal(self.counts, other.counts)
        )


@dataclass
class ConsistencyStats:
    records: list = field(default_factory=list)
    n_bins: int = 60
    half_range: float = 3.0

    @property
    def timesteps(self):
        return [r.t for r in self.records]

    def at(self, t):
        for r in self.records:
            if r.t == t:
                return r
        raise ParameterError(f"timestep {t} not present in stats")


@dataclass
class MetricReport:
    """Mean metrics per sampling mode."""

    prompt_alignment: dict = field(default_factory=dict)
    identity_preservation: dict = field(default_factory=dict)

    def add(self, mode, alignment, identity):
        self.prompt_alignment[mode] = float(alignment)
        self.identity_preservation[mode] = float(identity)


def collect_cp_stats(traces):
    """Average ``mu`` / ``sigma`` across traces and pool histograms per step."""
    traces = list(traces)
    if not traces:
        raise ParameterError("need at least one trace")
    first = traces[0]
    for tr in traces[1:]:
        if len(tr) != len(first):
            raise ParameterError(f"traces have mismatched step counts ({len(first)} vs {len(tr)})")
        if tr.timesteps != first.timesteps:
            raise ParameterError("traces cover different timesteps")
        if tr.n_bins != first.n_bins:
            raise ParameterError("traces use different histogram bins")
    ts = first.timesteps
    if any(b >= a for a, b in zip(ts, ts[1:])):
        raise ParameterError("trace timesteps must be strictly decreasing")
    stats = ConsistencyStats(n_bins=first.n_bins, half_range=first.half_range)
    for i, t in enumerate(ts):
        recs = [tr.records[i] for tr in traces]
        stats.records.append(
            StatsRecord(
                t=t,
                mu=float(np.mean([r.cp_mean for r in recs])),
                sigma=float(np.mean([r.cp_std for r in recs])),
                counts=np.sum([r.histogram for r in recs], axis=0).astype(np.int64),
            )
        )
    return stats


def _locations(samples, model_shape=None):
    data, shape = check_grids(samples, name="samples")
    if model_shape is not None and shape != tuple(model_shape):
        raise ShapeError(f"sample shape {shape} differs from model shape {model_shape}")
    c, w, h = shape
    return data.reshape(-1, w, h, c)


def prompt_alignment_score(samples, base, cond):
    """Mean log-density of ``samples`` under ``base``'s clean conditional mixture."""
    x = _locations(samples, base.grid_shape)
    return float(np.mean(base.log_density_arrays(x, cond, alpha_bar=1.0)))


def identity_score(samples, references):
    """Negative mean squared distance to the nearest reference, per entry.

    Zero is the maximum (every sample equals some reference).
    """
    s, s_shape = check_grids(samples, name="samples")
    r, r_shape = check_grids(references, name="references")
    if s_shape != r_shape:
        raise ShapeError(f"sample shape {s_shape} differs from reference shape {r_shape}")
    d2 = np.sum((s[:, None, :] - r[None, :, :]) ** 2, axis=-1)
    return float(-np.mean(d2.min(axis=1)) / s.shape[1])


def _stats_header(n_bins):
    return ["t", "mu", "sigma", "underflow"] + [f"bin_{i}" for i in range(n_bins)] + ["overflow"]


def export_stats_csv(stats, path):
    """Write ``t,mu,sigma,underflow,bin_0..bin_{B-1},overflow``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(_stats_header(stats.n_bins))
        for r in stats.records:
            wr.writerow([r.t, repr(float(r.mu)), repr(float(r.sigma))] + [int(v) for v in r.counts])


def read_stats_csv(path, half_range=3.0):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty stats file")
    n_bins = len(rows[0]) - 5
    if n_bins < 1 or rows[0] != _stats_header(n_bins):
        raise FormatError(f"{path}: unexpected stats header")
    stats = ConsistencyStats(n_bins=n_bins, half_range=half_range)
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise FormatError(f"{path}:{lineno}: wrong field count")
        try:
            stats.records.append(
                StatsRecord(int(row[0]), float(row[1]), float(row[2]), np.array([int(v) for v in row[3:]]))
            )
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return stats


_BAR = (40, 70, 160)
_TAIL = (190, 40, 40)
_ZERO = (170, 170, 170)
_BG = (255, 255, 255)


def render_histogram_image(stats, t, path, bar_width=4, height=80):
    """Plain-PPM (P3) bar chart of the Consistency_p histogram at step ``t``.

    One bar per bin, underflow and overflow at the far left / right in red;
    a grey tick column marks the bin that starts at zero.  Bar heights are
    scaled so the tallest bin fills the image.
    """
    rec = stats.at(t)
    counts = np.asarray(rec.counts)
    peak = counts.max()
    bars = np.zeros(counts.size, dtype=np.int64) if peak == 0 else np.rint(counts * height / peak).astype(np.int64)
    zero_bin = 1 + stats.n_bins // 2 if stats.n_bins % 2 == 0 else None
    width = counts.size * bar_width
    lines = ["P3", f"{width} {height}", "255"]
    for row in range(height):
        level = height - row
        pixels = []
        for b, bar_h in enumerate(bars):
            if bar_h >= level:
                color = _TAIL if b in (0, counts.size - 1) else _BAR
            elif b == zero_bin and row >= height - 2:
                color = _ZERO
            else:
                color = _BG
            pixels.extend([" ".join(map(str, color))] * bar_width)
        lines.append(" ".join(pixels))
    Path(path).write_text("\n".join(lines) + "\n")


def histogram_mass_conserved(stats, n_locations, n_traces):
    """True when every step's counts sum to ``n_locations * n_traces``."""
    return all(int(np.sum(r.counts)) == n_locations * n_traces for r in stats.records)


def summarize_drift(stats):
    """Mean ``mu`` over the first and last halves of the steps (early = high t)."""
    mus = [r.mu for r in stats.records]
    if not mus:
        return math.nan, math.nan
    half = max(1, len(mus) // 2)
    return float(np.mean(mus[:half])), float(np.mean(mus[half:] or mus))
