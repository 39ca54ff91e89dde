import math
from pathlib import Path

import numpy as np
import pytest

import naive
from prguide import (
    Condition,
    FormatError,
    GaussianMixtureModel,
    GuidedDDIMSampler,
    LatentGrid,
    ParameterError,
    ShapeError,
)
from prguide.diagnostics import (
    ConsistencyStats,
    StatsRecord,
    collect_cp_stats,
    export_stats_csv,
    histogram_mass_conserved,
    identity_score,
    prompt_alignment_score,
    read_stats_csv,
    render_histogram_image,
)
from prguide.sampler import SamplerTrace, StepRecord
from prguide.scenario import toy_scenario

GOLDEN = Path(__file__).parent / "golden"


def trace(seed, ts=(3, 2, 1), n_bins=4):
    rng = np.random.default_rng(seed)
    recs = []
    for t in ts:
        hist = rng.multinomial(8, np.ones(n_bins + 2) / (n_bins + 2))
        recs.append(StepRecord(t, rng.normal(), rng.uniform(), 1.0, 0.5, 0.5, hist))
    return SamplerTrace(recs, n_bins=n_bins)


def small_stats():
    return ConsistencyStats(
        records=[
            StatsRecord(3, -0.125, 0.5, np.array([0, 1, 2, 5, 4, 2, 1, 1])),
            StatsRecord(2, 0.0, 0.0, np.array([0, 0, 0, 16, 0, 0, 0, 0])),
            StatsRecord(1, 0.25, 1.5, np.array([3, 0, 1, 2, 2, 1, 0, 7])),
        ],
        n_bins=6,
        half_range=3.0,
    )


class TestCollect:
    def test_single_trace(self):
        tr = trace(0)
        stats = collect_cp_stats([tr])
        for s, r in zip(stats.records, tr.records):
            assert (s.t, s.mu, s.sigma) == (r.t, r.cp_mean, r.cp_std)
            assert np.array_equal(s.counts, r.histogram)

    def test_duplicated_trace(self):
        tr = trace(1)
        one, two = collect_cp_stats([tr]), collect_cp_stats([tr, tr])
        for a, b in zip(one.records, two.records):
            assert (a.mu, a.sigma) == (b.mu, b.sigma)
            assert np.array_equal(2 * a.counts, b.counts)

    def test_mass_conservation(self):
        traces = [trace(s) for s in range(5)]
        assert histogram_mass_conserved(collect_cp_stats(traces), 8, 5)

    def test_identical_models(self):
        sc = toy_scenario()
        s = GuidedDDIMSampler(mode="PR", steps=10).fit(sc.base, sc.base)
        _, traces = s.sample_batch(sc.condition, [0, 1, 2])
        stats = collect_cp_stats(traces)
        zero_bin = 1 + stats.n_bins // 2
        for r in stats.records:
            assert r.mu == 0 and r.sigma == 0
            assert r.counts[zero_bin] == r.counts.sum() == 16 * 3

    def test_mismatched_steps(self):
        with pytest.raises(ParameterError):
            collect_cp_stats([trace(0), trace(1, ts=(2, 1))])

    def test_different_timesteps(self):
        with pytest.raises(ParameterError):
            collect_cp_stats([trace(0), trace(1, ts=(4, 2, 1))])

    def test_non_decreasing(self):
        with pytest.raises(ParameterError):
            collect_cp_stats([trace(0, ts=(1, 2, 3))])

    def test_empty(self):
        with pytest.raises(ParameterError):
            collect_cp_stats([])


@pytest.fixture(scope="module")
def mixture():
    rng = np.random.default_rng(7)
    means = [LatentGrid(rng.standard_normal((2, 2, 2)) * 3) for _ in range(3)]
    return GaussianMixtureModel(means, [0.5, 0.3, 0.2], [1.0, 0.5, 2.0], [0, 0, 1])


class TestPromptAlignment:
    def test_monte_carlo_entropy(self, mixture):
        # Independent oracle: numpy draws scored with scipy densities.
        rng = np.random.default_rng(99)
        sel = [0, 1]
        w = np.array([0.5, 0.3]) / 0.8
        comp = rng.choice(sel, size=20000, p=w)
        flat_means = [m.data for m in mixture.means]
        pts = np.stack([flat_means[k] + math.sqrt(mixture.variances[k]) * rng.standard_normal(8) for k in comp])
        entropy = -np.mean(
            naive.gmm_log_density(pts, [flat_means[k] for k in sel], w, mixture.variances[sel], 1.0)
        )
        draws = mixture.sample_clean(20000, Condition.prompt(0), np.random.default_rng(5))
        samples = [LatentGrid.from_locations(x) for x in draws]
        score = prompt_alignment_score(samples, mixture, Condition.prompt(0))
        assert abs(-score - entropy) <= 0.05 * abs(entropy)

    def test_density_ordering(self, mixture):
        mu = mixture.means[0]
        far = mu + LatentGrid(np.full((2, 2, 2), 10.0))
        cond = Condition.prompt(0)
        assert prompt_alignment_score([mu], mixture, cond) > prompt_alignment_score([far], mixture, cond)

    def test_deterministic_and_permutation_invariant(self, mixture, rng):
        samples = [LatentGrid(rng.standard_normal((2, 2, 2))) for _ in range(6)]
        cond = Condition()
        a = prompt_alignment_score(samples, mixture, cond)
        assert a == prompt_alignment_score(samples, mixture, cond)
        assert a == pytest.approx(prompt_alignment_score(samples[::-1], mixture, cond), rel=1e-14)

    def test_errors(self, mixture):
        with pytest.raises(ParameterError):
            prompt_alignment_score([], mixture, Condition())
        with pytest.raises(ShapeError):
            prompt_alignment_score([LatentGrid.zeros(1, 2, 2)], mixture, Condition())


class TestIdentityScore:
    def test_self_distance(self, rng):
        refs = [LatentGrid(rng.standard_normal((2, 3, 2))) for _ in range(3)]
        assert identity_score(refs, refs) == 0.0

    def test_brute_force(self, rng):
        c, w, h = 2, 3, 2
        n = c * w * h
        ref = LatentGrid(rng.standard_normal((c, w, h)))
        unit = rng.standard_normal(n)
        unit /= np.linalg.norm(unit)
        sample = ref + LatentGrid.from_flat(unit / math.sqrt(n), c, w, h)
        assert identity_score([sample], [ref]) == pytest.approx(-1 / n**2, rel=1e-12)

        samples = [LatentGrid(rng.standard_normal((c, w, h))) for _ in range(4)]
        refs = [LatentGrid(rng.standard_normal((c, w, h))) for _ in range(3)]
        total = 0.0
        for s in samples:
            best = math.inf
            for r in refs:
                d = sum((s.get(*i) - r.get(*i)) ** 2 for i in np.ndindex(c, w, h))
                best = min(best, d)
            total += best
        assert identity_score(samples, refs) == pytest.approx(-total / len(samples) / n, rel=1e-12)

    def test_duplicate_reference(self, rng):
        samples = [LatentGrid(rng.standard_normal((2, 2, 2))) for _ in range(4)]
        refs = [LatentGrid(rng.standard_normal((2, 2, 2))) for _ in range(3)]
        assert identity_score(samples, refs) == identity_score(samples, refs + [refs[1]])

    def test_moving_toward_reference(self, rng):
        refs = [LatentGrid(rng.standard_normal((2, 2, 2))) for _ in range(3)]
        samples = [LatentGrid(rng.standard_normal((2, 2, 2))) for _ in range(5)]
        ref_data = np.stack([r.data for r in refs])
        prev = identity_score(samples, refs)
        for lam in (0.25, 0.5, 0.9, 1.0):
            moved = []
            for s in samples:
                near = ref_data[np.argmin(((ref_data - s.data) ** 2).sum(1))]
                moved.append(LatentGrid.from_flat(s.data + lam * (near - s.data), 2, 2, 2))
            score = identity_score(moved, refs)
            assert score >= prev
            prev = score
        assert prev == pytest.approx(0.0, abs=1e-28)

    def test_errors(self, rng):
        g = LatentGrid.zeros(1, 1, 1)
        with pytest.raises(ParameterError):
            identity_score([], [g])
        with pytest.raises(ParameterError):
            identity_score([g], [])
        with pytest.raises(ShapeError):
            identity_score([g], [LatentGrid.zeros(1, 1, 2)])


class TestExport:
    def test_empty(self, tmp_path):
        export_stats_csv(ConsistencyStats(n_bins=2), tmp_path / "s.csv")
        assert (tmp_path / "s.csv").read_text() == "t,mu,sigma,underflow,bin_0,bin_1,overflow\n"

    def test_golden(self, tmp_path):
        export_stats_csv(small_stats(), tmp_path / "s.csv")
        assert (tmp_path / "s.csv").read_bytes() == (GOLDEN / "small_stats.csv").read_bytes()

    def test_round_trip(self, tmp_path):
        stats = collect_cp_stats([trace(s) for s in range(3)])
        export_stats_csv(stats, tmp_path / "s.csv")
        back = read_stats_csv(tmp_path / "s.csv")
        assert back.records == stats.records and back.n_bins == stats.n_bins

    @pytest.mark.parametrize("content", ["", "t,mu\n", "t,mu,sigma,underflow,bin_0,overflow\n1,0,0,1,2\n",
                                         "t,mu,sigma,underflow,bin_0,overflow\n1,a,0,1,2,3\n"])
    def test_malformed(self, tmp_path, content):
        (tmp_path / "s.csv").write_text(content)
        with pytest.raises(FormatError):
            read_stats_csv(tmp_path / "s.csv")

    def test_io_error(self, tmp_path):
        with pytest.raises(OSError):
            export_stats_csv(small_stats(), tmp_path / "missing" / "s.csv")


def read_ppm(path):
    tokens = Path(path).read_text().split()
    assert tokens[0] == "P3"
    w, h, maxval = map(int, tokens[1:4])
    pix = np.array(tokens[4:], dtype=int)
    assert pix.size == w * h * 3 and maxval == 255
    return pix.reshape(h, w, 3)


class TestRender:
    def test_header_and_size(self, tmp_path):
        render_histogram_image(small_stats(), 1, tmp_path / "h.ppm")
        img = read_ppm(tmp_path / "h.ppm")
        assert img.shape == (80, 8 * 4, 3)

    def test_single_full_bar(self, tmp_path):
        render_histogram_image(small_stats(), 2, tmp_path / "h.ppm", bar_width=1, height=10)
        img = read_ppm(tmp_path / "h.ppm")
        filled = np.any(img != 255, axis=2)
        # bin_2 is column 3 (after underflow); column 4 starts at zero and carries the tick
        assert filled[:, 3].all()
        assert not filled[:, [0, 1, 2, 5, 6, 7]].any()
        assert filled[:, 4].tolist() == [False] * 8 + [True] * 2

    def test_golden(self, tmp_path):
        render_histogram_image(small_stats(), 3, tmp_path / "h.ppm")
        assert (tmp_path / "h.ppm").read_bytes() == (GOLDEN / "small_hist_t3.ppm").read_bytes()

    def test_missing_timestep(self, tmp_path):
        with pytest.raises(ParameterError):
            render_histogram_image(small_stats(), 9, tmp_path / "h.ppm")

    def test_io_error(self, tmp_path):
        with pytest.raises(OSError):
            render_histogram_image(small_stats(), 3, tmp_path / "nope" / "h.ppm")
