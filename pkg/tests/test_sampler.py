import math

import numpy as np
import pytest

import naive
from prguide import (
    Condition,
    ConfigurationError,
    GaussianMixtureModel,
    GuidedDDIMSampler,
    LatentGrid,
    NumericalDivergenceError,
    ParameterError,
    ShapeError,
    ddim_step,
    make_schedule,
)
from prguide.exceptions import FormatError
from prguide.models.base import NoisePredictor
from prguide.sampler import read_trace_csv, write_trace_csv
from prguide.scenario import toy_scenario
from prguide.schedule import NoiseSchedule


class TestSchedule:
    @pytest.mark.parametrize("kind", ["cosine", "linear"])
    @pytest.mark.parametrize("steps", [1, 2, 50, 1000])
    def test_invariants(self, kind, steps):
        s = make_schedule(steps, kind)
        ab = s.alpha_bar
        assert s.T == steps and ab.size == steps + 1
        assert ab[0] == 1.0
        assert np.all(np.diff(ab) < 0)
        assert 0 < ab[-1] < 0.05
        assert np.all(np.isfinite(ab))

    def test_default_is_cosine(self):
        assert make_schedule(50).kind == "cosine"

    def test_linear_product_oracle(self):
        s = make_schedule(50, "linear")
        betas = [(1e-4 + (0.02 - 1e-4) * i / 49) * 1000 / 50 for i in range(50)]
        prod = 1.0
        for b in betas:
            prod *= 1 - b
        assert s.alpha_bar[50] == pytest.approx(prod, rel=1e-12)

    @pytest.mark.parametrize("steps", [0, -3, 2.5])
    def test_bad_steps(self, steps):
        with pytest.raises(ParameterError):
            make_schedule(steps)

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            make_schedule(10, "sigmoid")

    @pytest.mark.parametrize("ab", [[1.0], [0.9, 0.5], [1.0, 0.5, 0.5], [1.0, 0.5, 0.0], [1.0, np.nan]])
    def test_custom_schedule_validation(self, ab):
        with pytest.raises(ParameterError):
            NoiseSchedule(np.array(ab))


class TestDdimStep:
    sched = make_schedule(50)

    def test_exact_noise_reconstruction(self, make_grid):
        x0, eps = make_grid(), make_grid()
        for t in (1, 17, 50):
            a, ap = self.sched[t], self.sched[t - 1]
            x_t = x0 * math.sqrt(a) + eps * math.sqrt(1 - a)
            expect = x0 * math.sqrt(ap) + eps * math.sqrt(1 - ap)
            assert ddim_step(x_t, eps, t, self.sched).allclose(expect, atol=1e-9 / math.sqrt(a))

    def test_zero_noise(self, make_grid):
        x = make_grid()
        t = 20
        out = ddim_step(x, LatentGrid.zeros(*x.shape), t, self.sched)
        assert out.allclose(x * math.sqrt(self.sched[t - 1] / self.sched[t]), atol=1e-12)

    def test_matches_naive(self, make_grid):
        for t in (1, 25, 50):
            x, eps = make_grid(), make_grid()
            ref = naive.ddim(x.to_chw(), eps.to_chw(), self.sched[t], self.sched[t - 1])
            out = ddim_step(x, eps, t, self.sched).to_chw()
            assert np.max(np.abs(out - ref)) <= 1e-12 * max(1, np.abs(ref).max())

    @pytest.mark.parametrize("t", [0, 51])
    def test_timestep_range(self, make_grid, t):
        x = make_grid()
        with pytest.raises(ParameterError):
            ddim_step(x, x, t, self.sched)

    def test_shape_mismatch(self, make_grid):
        with pytest.raises(ShapeError):
            ddim_step(make_grid(2, 2, 2), make_grid(2, 2, 3), 5, self.sched)

    def test_stochastic_needs_rng(self, make_grid):
        x = make_grid()
        with pytest.raises(ParameterError):
            ddim_step(x, x, 5, self.sched, eta=0.5)

    def test_stochastic_is_seeded(self, make_grid):
        x, e = make_grid(), make_grid()
        a = ddim_step(x, e, 5, self.sched, eta=1.0, rng=np.random.default_rng(3))
        b = ddim_step(x, e, 5, self.sched, eta=1.0, rng=np.random.default_rng(3))
        assert a == b
        assert a != ddim_step(x, e, 5, self.sched)


@pytest.fixture(scope="module")
def toy():
    return toy_scenario()


def sampler(mode, toy, **kw):
    return GuidedDDIMSampler(mode=mode, **kw).fit(toy.base, toy.personalized)


class TestSampler:
    def test_defaults(self):
        p = GuidedDDIMSampler().get_params()
        assert (p["omega_text"], p["omega_cons"], p["steps"], p["eta"]) == (7.5, 3.0, 50, 0.0)

    def test_determinism(self, toy):
        s = sampler("PR", toy, keep_fields=True)
        x1, t1 = s.sample(toy.condition, seed=11)
        x2, t2 = sampler("PR", toy, keep_fields=True).sample(toy.condition, seed=11)
        assert x1 == x2
        assert t1.same_stats(t2)
        assert all(a.cp == b.cp and a.cp_standardized == b.cp_standardized for a, b in zip(t1.records, t2.records))

    def test_batch_equals_individual_runs(self, toy):
        s = sampler("PR", toy)
        xs, traces = s.sample_batch(toy.condition, [4, 5, 6])
        for seed, x, tr in zip([4, 5, 6], xs, traces):
            x1, t1 = s.sample(toy.condition, seed=seed)
            assert np.max(np.abs(x.data - x1.data)) <= 1e-12
            assert [r.t for r in tr.records] == [r.t for r in t1.records]

    def test_trace_completeness(self, toy):
        for steps in (1, 7, 50):
            _, tr = sampler("PR", toy, steps=steps).sample(toy.condition, seed=0)
            assert tr.timesteps == list(range(steps, 0, -1))
            c, w, h = toy.shape
            assert all(int(r.histogram.sum()) == w * h for r in tr.records)
            assert all(r.histogram.size == 62 for r in tr.records)

    @pytest.mark.parametrize("mode", ["CG", "PR"])
    def test_zero_consistency_scale_reduces_to_cfg(self, toy, mode):
        seeds = list(range(5))
        ref, ref_tr = sampler("CFG", toy, omega_cons=0.0).sample_batch(toy.condition, seeds)
        out, out_tr = sampler(mode, toy, omega_cons=0.0).sample_batch(toy.condition, seeds)
        for a, b, ta, tb in zip(ref, out, ref_tr, out_tr):
            assert np.max(np.abs(a.data - b.data)) <= 1e-12
            assert ta.same_stats(tb)

    def test_identical_models_reduce_to_cfg(self, toy):
        seeds = list(range(5))
        ref, _ = GuidedDDIMSampler(mode="CFG").fit(toy.base).sample_batch(toy.condition, seeds)
        out, traces = GuidedDDIMSampler(mode="PR").fit(toy.base, toy.base).sample_batch(toy.condition, seeds)
        assert all(a == b for a, b in zip(ref, out))
        for tr in traces:
            assert all(r.cp_mean == 0 and r.cp_std == 0 for r in tr.records)
            assert all(r.histogram[31] == r.histogram.sum() for r in tr.records)

    def test_missing_personalized_model(self, toy):
        for mode in ("CG", "PR"):
            with pytest.raises(ConfigurationError):
                GuidedDDIMSampler(mode=mode).fit(toy.base)
        GuidedDDIMSampler(mode="CFG").fit(toy.base)

    @pytest.mark.parametrize(
        "params",
        [
            {"mode": "XYZ"},
            {"steps": 0},
            {"eta": 1.5},
            {"omega_text": -1.0},
            {"eps_std": 0.0},
            {"schedule": "sigmoid"},
            {"mode": "PR", "omega_text": 0.0},
        ],
    )
    def test_invalid_config(self, toy, params):
        with pytest.raises(ConfigurationError):
            GuidedDDIMSampler(**params).fit(toy.base, toy.personalized)

    def test_shape_mismatch(self, toy):
        with pytest.raises(ShapeError):
            sampler("PR", toy).sample(toy.condition, shape=(2, 2, 2))

    def test_stochastic_mode_is_seeded(self, toy):
        a, _ = sampler("PR", toy, eta=0.5).sample(toy.condition, seed=3)
        b, _ = sampler("PR", toy, eta=0.5).sample(toy.condition, seed=3)
        c, _ = sampler("PR", toy).sample(toy.condition, seed=3)
        assert a == b and a != c

    def test_shared_initial_noise_across_modes(self, toy):
        recs = {}
        for mode in ("CFG", "CG", "PR"):
            _, tr = sampler(mode, toy, keep_latents=True).sample(toy.condition, seed=9)
            recs[mode] = tr.records[0].latent
        assert recs["CFG"] == recs["CG"] == recs["PR"]

    def test_no_divergence_over_many_seeds(self, toy):
        for mode in ("CFG", "CG", "PR"):
            xs, _ = sampler(mode, toy).sample_batch(toy.condition, range(100), record_trace=False)
            assert all(np.all(np.isfinite(x.data)) for x in xs)

    def test_divergence_names_timestep(self):
        class Exploding(NoisePredictor):
            grid_shape = (1, 1, 1)

            def epsilon_arrays(self, x, t, cond, schedule):
                return np.full(x.shape, np.inf if t == 7 else 0.0)

        s = GuidedDDIMSampler(mode="CFG", steps=10).fit(Exploding())
        with pytest.raises(NumericalDivergenceError, match="t=7") as info:
            s.sample(Condition.prompt(0), seed=0)
        assert info.value.t == 7


class TestTraceCsv:
    def test_round_trip(self, toy, tmp_path):
        _, tr = sampler("PR", toy).sample(toy.condition, seed=2)
        write_trace_csv(tr, tmp_path / "trace.csv")
        back = read_trace_csv(tmp_path / "trace.csv")
        assert back.same_stats(tr)
        header = (tmp_path / "trace.csv").read_text().splitlines()[0].split(",")
        assert header[:6] == ["t", "cp_mean", "cp_std", "g_text_norm", "g_par_norm", "g_perp_norm"]
        assert header[6:] == [f"bin_{i}" for i in range(62)]

    @pytest.mark.parametrize(
        "content",
        [
            "",
            "a,b,c\n",
            "t,cp_mean,cp_std,g_text_norm,g_par_norm,g_perp_norm,bin_0,bin_1,bin_2\n1,0,0,0,0,0,1,2\n",
            "t,cp_mean,cp_std,g_text_norm,g_par_norm,g_perp_norm,bin_0,bin_1,bin_2\n1,x,0,0,0,0,1,2,3\n",
            "t,cp_mean,cp_std,g_text_norm,g_par_norm,g_perp_norm,bin_0,bin_1,bin_2\n1,nan,0,0,0,0,1,2,3\n",
            "t,cp_mean,cp_std,g_text_norm,g_par_norm,g_perp_norm,bin_0,bin_1,bin_2\n1,0,0,0,0,0,-1,2,3\n",
        ],
    )
    def test_malformed(self, tmp_path, content):
        p = tmp_path / "trace.csv"
        p.write_text(content)
        with pytest.raises(FormatError, match="trace.csv"):
            read_trace_csv(p)


def test_single_gaussian_moments_small():
    """Quick version of the calibration check; the full one lives in the acceptance suite."""
    mu = LatentGrid(np.array([[[0.5]], [[-1.0]]]))
    model = GaussianMixtureModel([mu], [1.0], [1.0], [0])
    s = GuidedDDIMSampler(mode="CFG", omega_text=1.0).fit(model)
    xs, _ = s.sample_batch(Condition.prompt(0), range(2000), record_trace=False)
    data = np.stack([x.data for x in xs])
    assert np.all(np.abs(data.mean(0) - mu.data) < 0.1)
    assert np.all(np.abs(data.var(0) - 1) < 0.15)
