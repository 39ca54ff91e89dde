"""DDIM sampling with CFG, consistency guidance or parallel rescaling."""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from prguide.exceptions import (
    ConfigurationError,
    FormatError,
    NumericalDivergenceError,
    ParameterError,
    ShapeError,
)
from prguide.grid import LatentGrid, ScalarField
from prguide.guidance import MODES, GuidanceScales, RescaleConstants, combine_arrays
from prguide.schedule import SCHEDULE_KINDS, NoiseSchedule, make_schedule
from prguide.utils.validation import check_seeds, check_shape

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "ddim_step",
    "ddim_step_arrays",
    "StepRecord",
    "SamplerTrace",
    "GuidedDDIMSampler",
    "histogram_edges",
    "write_trace_csv",
    "read_trace_csv",
    "TRACE_COLUMNS",
]

TRACE_COLUMNS = ("t", "cp_mean", "cp_std", "g_text_norm", "g_par_norm", "g_perp_norm")


def ddim_step_arrays(x_t, eps, t, schedule, eta=0.0, noise=None):
    """One DDIM update from ``t`` to ``t - 1`` on raw arrays."""
    if not (1 <= t <= schedule.T):
        raise ParameterError(f"timestep {t} outside 1..{schedule.T}")
    a_t = schedule.alpha_bar[t]
    a_prev = schedule.alpha_bar[t - 1]
    x0_hat = (x_t - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    if eta == 0:
        return np.sqrt(a_prev) * x0_hat + np.sqrt(1.0 - a_prev) * eps
    sigma = eta * np.sqrt((1.0 - a_prev) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_prev)
    direction = np.sqrt(max(1.0 - a_prev - sigma**2, 0.0)) * eps
    return np.sqrt(a_prev) * x0_hat + direction + sigma * noise


def ddim_step(x_t, eps_final, t, schedule, eta=0.0, rng=None):
    """DDIM update ``x_t -> x_{t-1}`` driven by ``eps_final``.

    With ``eta = 0`` the step is deterministic and ``rng`` is unused.
    """
    if x_t.shape != eps_final.shape:
        raise ShapeError(f"shape mismatch: {x_t.shape} vs {eps_final.shape}")
    if not (0.0 <= eta <= 1.0):
        raise ParameterError(f"eta must lie in [0, 1], got {eta}")
    noise = None
    if eta > 0:
        if rng is None:
            raise ParameterError("eta > 0 requires an rng")
        noise = rng.standard_normal(x_t.locations.shape)
    out = ddim_step_arrays(x_t.locations, eps_final.locations, t, schedule, eta, noise)
    return LatentGrid.from_locations(out)


def histogram_edges(n_bins=60, half_range=3.0):
    """Interior bin edges; the trace histograms add one underflow bin below
    ``-half_range`` and one overflow bin at or above ``+half_range``."""
    return np.linspace(-half_range, half_range, n_bins + 1)


def _histograms(cp, n_bins, half_range):
    """Counts per latent, shape ``(n, n_bins + 2)``: underflow, bins, overflow."""
    n = cp.shape[0]
    pos = np.floor((cp.reshape(n, -1) + half_range) * (n_bins / (2.0 * half_range)))
    idx = np.clip(pos, -1, n_bins).astype(np.int64) + 1
    width = n_bins + 2
    idx += (np.arange(n) * width)[:, None]
    return np.bincount(idx.ravel(), minlength=n * width).reshape(n, width)


@dataclass
class StepRecord:
    """Guidance statistics for one executed step of one latent.

    ``histogram`` has ``n_bins + 2`` counts: underflow, the interior bins,
    overflow.  ``cp`` / ``cp_standardized`` / ``latent`` are kept only when
    the sampler is asked to.
    """

    t: int
    cp_mean: float
    cp_std: float
    g_text_norm: float
    g_par_norm: float
    g_perp_norm: float
    histogram: np.ndarray
    cp: ScalarField | None = None
    cp_standardized: ScalarField | None = None
    latent: LatentGrid | None = None

    def same_stats(self, other):
        return (
            self.t == other.t
            and self.cp_mean == other.cp_mean
            and self.cp_std == other.cp_std
            and self.g_text_norm == other.g_text_norm
            and self.g_par_norm == other.g_par_norm
            and self.g_perp_norm == other.g_perp_norm
            and np.array_equal(self.histogram, other.histogram)
        )


@dataclass
class SamplerTrace:
    records: list = field(default_factory=list)
    n_bins: int = 60
    half_range: float = 3.0

    def __len__(self):
        return len(self.records)

    @property
    def timesteps(self):
        return [r.t for r in self.records]

    def same_stats(self, other):
        return len(self) == len(other) and all(a.same_stats(b) for a, b in zip(self.records, other.records))


class GuidedDDIMSampler(BaseEstimator):
    """Deterministic DDIM sampler with a pluggable guidance combiner.

    ``mode`` picks the per-step noise estimate:

    * ``"CFG"``: ``eps(x|empty) + w_t g_text`` with the base model only;
    * ``"CG"``: adds ``w_c g_cons`` where ``g_cons = eps_theta(x|c) - eps_phi(x|c)``;
    * ``"PR"``: replaces the part of ``g_cons`` along ``g_text`` by its
      standardized per-location ratio before recombining.

    Call :meth:`fit` with the base and (for CG/PR) personalized predictors,
    then :meth:`sample` or :meth:`sample_batch`.  Each seed owns an
    independent generator for ``x_T`` (and for eta > 0 noise), so a batch is
    just many independent runs evaluated together.  Statistics are always
    per latent.

    Parameters
    ----------
    mode : {"CFG", "CG", "PR"}, default="PR"
    omega_text, omega_cons : float, default=7.5, 3.0
    steps : int, default=50
    eta : float, default=0.0
    schedule : {"cosine", "linear"}, default="cosine"
    eps_std, eps_proj : float, default=1e-8, 1e-12
    seed : int, default=0
    n_bins : int, default=60
    half_range : float, default=3.0
    keep_fields : bool, default=False
        Store per-step ``cp`` and standardized ``cp`` fields in the trace.
    keep_latents : bool, default=False
        Store ``x_t`` before every step in the trace.
    """

    def __init__(
        self,
        mode="PR",
        omega_text=7.5,
        omega_cons=3.0,
        steps=50,
        eta=0.0,
        schedule="cosine",
        eps_std=1e-8,
        eps_proj=1e-12,
        seed=0,
        n_bins=60,
        half_range=3.0,
        keep_fields=False,
        keep_latents=False,
    ):
        self.mode = mode
        self.omega_text = omega_text
        self.omega_cons = omega_cons
        self.steps = steps
        self.eta = eta
        self.schedule = schedule
        self.eps_std = eps_std
        self.eps_proj = eps_proj
        self.seed = seed
        self.n_bins = n_bins
        self.half_range = half_range
        self.keep_fields = keep_fields
        self.keep_latents = keep_latents

    def _check_config(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigurationError(f"steps must be a positive integer, got {self.steps}")
        if not (0.0 <= self.eta <= 1.0):
            raise ConfigurationError(f"eta must lie in [0, 1], got {self.eta}")
        if self.n_bins < 1 or not self.half_range > 0:
            raise ConfigurationError("histogram needs n_bins >= 1 and half_range > 0")
        if isinstance(self.schedule, str) and self.schedule not in SCHEDULE_KINDS:
            raise ConfigurationError(f"schedule must be one of {SCHEDULE_KINDS}")
        try:
            scales = GuidanceScales(float(self.omega_text), float(self.omega_cons))
            consts = RescaleConstants(float(self.eps_std), float(self.eps_proj))
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        if self.mode == "PR" and scales.omega_text == 0:
            raise ConfigurationError("PR mode requires omega_text > 0")
        return scales, consts

    def fit(self, base_model, personalized_model=None):
        """Bind the predictors and build the noise schedule."""
        self.scales_, self.consts_ = self._check_config()
        if self.mode in ("CG", "PR") and personalized_model is None:
            raise ConfigurationError(f"{self.mode} mode needs a personalized model")
        if personalized_model is not None and tuple(personalized_model.grid_shape) != tuple(base_model.grid_shape):
            raise ConfigurationError("base and personalized models disagree on the latent shape")
        if isinstance(self.schedule, NoiseSchedule):
            if self.schedule.T != self.steps:
                raise ConfigurationError("custom schedule length differs from steps")
            self.schedule_ = self.schedule
        else:
            self.schedule_ = make_schedule(int(self.steps), self.schedule)
        self.base_model_ = base_model
        self.personalized_model_ = personalized_model
        return self

    def initial_noise(self, seed, shape):
        """``x_T ~ N(0, I)`` for one seed, as a (W, H, C) array."""
        c, w, h = shape
        return np.random.default_rng(seed).standard_normal((w, h, c))

    def sample(self, cond, shape=None, seed=None):
        """Run one sampling trajectory.

        Returns
        -------
        x0 : LatentGrid
        trace : SamplerTrace
        """
        seed = self.seed if seed is None else seed
        x0, traces = self.sample_batch(cond, [seed], shape=shape)
        return x0[0], traces[0]

    def sample_batch(self, cond, seeds, shape=None, record_trace=True):
        """Independent trajectories for several seeds.

        Returns a list of ``LatentGrid`` and a list of traces (None entries
        when ``record_trace`` is False).
        """
        check_is_fitted(self, "schedule_")
        shape = check_shape(self.base_model_.grid_shape if shape is None else shape)
        if shape != tuple(self.base_model_.grid_shape):
            raise ShapeError(f"requested shape {shape} differs from model shape {self.base_model_.grid_shape}")
        seeds = check_seeds(seeds)
        x, traces = self._run(cond, seeds, shape, record_trace)
        return [LatentGrid.from_locations(xi) for xi in x], traces

    def _run(self, cond, seeds, shape, record_trace):
        uncond = type(cond)()
        rngs = [np.random.default_rng(s) for s in seeds]
        c, w, h = shape
        x = np.stack([r.standard_normal((w, h, c)) for r in rngs])
        traces = [SamplerTrace(n_bins=self.n_bins, half_range=self.half_range) for _ in seeds]
        if not record_trace:
            traces = [None] * len(seeds)
        # Non-finite values are caught explicitly below, so silence numpy's warnings.
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(self.schedule_.T, 0, -1):
                x = self._step(x, t, cond, uncond, rngs, traces, record_trace)
        return x, traces

    def _step(self, x, t, cond, uncond, rngs, traces, record_trace):
        sched = self.schedule_
        base, pers = self.base_model_, self.personalized_model_
        # Evaluation order: base conditional, base unconditional, personalized conditional.
        eps_c = base.epsilon_arrays(x, t, cond, sched)
        eps_u = base.epsilon_arrays(x, t, uncond, sched)
        g_text = eps_c - eps_u
        g_cons = None
        if pers is not None:
            g_cons = pers.epsilon_arrays(x, t, cond, sched) - eps_c
        eps, parts = combine_arrays(self.mode, eps_u, g_text, g_cons, self.scales_, self.consts_)
        if not np.all(np.isfinite(eps)):
            raise NumericalDivergenceError(t, f"non-finite noise estimate at timestep t={t}")
        if record_trace:
            self._record(traces, t, x, g_text, parts)
        noise = None
        if self.eta > 0:
            noise = np.stack([r.standard_normal(x.shape[1:]) for r in rngs])
        x = ddim_step_arrays(x, eps, t, sched, self.eta, noise)
        if not np.all(np.isfinite(x)):
            raise NumericalDivergenceError(t)
        return x

    def _record(self, traces, t, x, g_text, parts):
        norm = lambda a: np.sqrt(np.sum(a * a, axis=(-3, -2, -1)))
        gt, gp, go = norm(g_text), norm(parts["g_par"]), norm(parts["g_perp"])
        hist = _histograms(parts["cp"], self.n_bins, self.half_range)
        for i, trace in enumerate(traces):
            rec = StepRecord(
                t=t,
                cp_mean=float(parts["cp_mean"][i]),
                cp_std=float(parts["cp_std"][i]),
                g_text_norm=float(gt[i]),
                g_par_norm=float(gp[i]),
                g_perp_norm=float(go[i]),
                histogram=hist[i],
            )
            if self.keep_fields:
                rec.cp = ScalarField(parts["cp"][i])
                rec.cp_standardized = ScalarField(parts["z"][i])
            if self.keep_latents:
                rec.latent = LatentGrid.from_locations(x[i])
            trace.records.append(rec)


def _fmt(v):
    return repr(float(v))


def write_trace_csv(trace, path):
    """Write ``t,cp_mean,cp_std,g_text_norm,g_par_norm,g_perp_norm,bin_0..bin_{B-1}``.

    ``B = n_bins + 2``: ``bin_0`` is the underflow bin and ``bin_{B-1}`` the
    overflow bin, so each row's bins sum to W*H.
    """
    width = trace.n_bins + 2
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(list(TRACE_COLUMNS) + [f"bin_{i}" for i in range(width)])
        for r in trace.records:
            wr.writerow(
                [r.t, _fmt(r.cp_mean), _fmt(r.cp_std), _fmt(r.g_text_norm), _fmt(r.g_par_norm), _fmt(r.g_perp_norm)]
                + [int(v) for v in r.histogram]
            )


def read_trace_csv(path, half_range=3.0):
    """Parse a trace CSV; raises :class:`FormatError` on malformed input."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: cannot read trace ({exc})") from exc
    if not rows:
        raise FormatError(f"{path}: empty trace file")
    header = rows[0]
    n_fixed = len(TRACE_COLUMNS)
    width = len(header) - n_fixed
    if tuple(header[:n_fixed]) != TRACE_COLUMNS or width < 3 or header[n_fixed:] != [f"bin_{i}" for i in range(width)]:
        raise FormatError(f"{path}: unexpected trace header")
    trace = SamplerTrace(n_bins=width - 2, half_range=half_range)
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(v) for v in row[1:n_fixed]]
            t = int(row[0])
            hist = np.array([int(v) for v in row[n_fixed:]], dtype=np.int64)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        if not all(math.isfinite(v) for v in vals) or np.any(hist < 0):
            raise FormatError(f"{path}:{lineno}: invalid values")
        trace.records.append(StepRecord(t, *vals, histogram=hist))
    return trace
