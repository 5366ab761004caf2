import numpy as np
import pytest

from coxcov import covariates as cov
from coxcov import pointproc as pp
from coxcov import polyatree as pt
from coxcov.geometry import Grid, Window, build_partition


def _grid(n, cells):
    return Grid(Window(dim_D=1, volume_n=float(n)), cells_per_axis=cells)


def _uniform_field(n, cells):
    vals = ((np.arange(cells) + 0.5) / cells)[:, None]
    return cov.CovariateField(grid=_grid(n, cells), dim_d=1, values=vals,
                              generator={}, stationary_measure={"kind": "uniform",
                                                                "dim": 1})


class TestIntensityRaster:
    def test_constant(self):
        f = _uniform_field(16, 32)
        lam = pp.intensity_raster(pp.AnalyticIntensity("constant", (3.0,)), f)
        assert np.all(lam == 3.0)

    def test_identity_on_values(self):
        f = _uniform_field(16, 32)
        lam = pp.intensity_raster(pp.AnalyticIntensity("linear", (0.0, 1.0)), f)
        assert lam[5] == pytest.approx(f.values[5, 0])

    def test_tree_all_spikes_is_flat(self):
        from dataclasses import replace
        f = _uniform_field(64, 256)
        tree = build_partition(1, 3)
        mass = cov.pushforward(f, tree)
        hyper = replace(pt.PolyaHyper.default(3, free_depth=0),
                        spike_weight=np.ones(3))
        draw = pt.prior_sample(tree, mass, hyper, 1)
        lam = pp.intensity_raster(draw, f)
        assert np.allclose(lam, draw.rho_star)

    def test_negative_rejected(self):
        f = _uniform_field(16, 32)
        with pytest.raises(pp.IntensityError):
            pp.intensity_raster(pp.AnalyticIntensity("linear", (-2.0, 1.0)), f)


class TestSampleCox:
    def test_zero_rate_empty(self):
        g = _grid(100, 400)
        pat = pp.sample_cox(np.zeros(400), g, 0)
        assert pat.total == 0
        assert pat.points.shape == (0, 1)

    def test_homogeneous_counts(self):
        g = _grid(100, 400)
        lam = np.ones(400)
        totals = np.array([pp.sample_cox(lam, g, s).total
                           for s in range(10_000)])
        se = totals.std() / np.sqrt(len(totals))
        assert abs(totals.mean() - 100.0) < 3 * se
        var_se = totals.var() * np.sqrt(2.0 / len(totals))
        assert abs(totals.var() - 100.0) < 4 * var_se

    def test_step_support(self):
        g = _grid(100, 400)
        lam = np.where(g.cell_centers()[:, 0] < 0.0, 2.0, 0.0)
        totals = []
        for s in range(2000):
            pat = pp.sample_cox(lam, g, s)
            assert np.all(pat.points[:, 0] < 0.0)
            totals.append(pat.total)
        totals = np.array(totals)
        se = totals.std() / np.sqrt(len(totals))
        assert abs(totals.mean() - 100.0) < 3 * se

    def test_points_inside_window_and_cells(self):
        g = _grid(64, 128)
        pat = pp.sample_cox(np.full(128, 2.0), g, 5)
        assert np.all(np.abs(pat.points[:, 0]) <= g.window.half_side)
        recount = np.bincount(g.cell_index_of(pat.points), minlength=128)
        assert np.array_equal(recount, pat.cell_counts)

    def test_determinism(self):
        g = _grid(64, 128)
        a = pp.sample_cox(np.full(128, 1.5), g, 9)
        b = pp.sample_cox(np.full(128, 1.5), g, 9)
        assert np.array_equal(a.points, b.points)

    def test_campbell_formula(self):
        # mean of sum_points f(cell) equals sum_cells f * lambda * vol
        g = _grid(32, 64)
        f = _uniform_field(32, 64)
        lam = pp.intensity_raster(pp.AnalyticIntensity("linear", (1.0, 2.0)), f)
        fvals = np.cos(2 * np.pi * f.values[:, 0])
        want = float(np.dot(fvals, lam) * g.cell_volume)
        sums = np.empty(4000)
        for s in range(4000):
            pat = pp.sample_cox(lam, g, s)
            sums[s] = np.dot(fvals, pat.cell_counts)
        se = sums.std() / np.sqrt(len(sums))
        assert abs(sums.mean() - want) < 4 * se


class TestLogLikelihood:
    def test_empty_pattern_constant_rate(self):
        g = _grid(50, 200)
        f = _uniform_field(50, 200)
        pat = pp.sample_cox(np.zeros(200), g, 0)
        ll = pp.log_likelihood(pp.AnalyticIntensity("constant", (2.5,)), f, pat)
        assert ll.value == pytest.approx(-2.5 * 50.0)

    def test_single_point(self):
        g = _grid(50, 200)
        f = _uniform_field(50, 200)
        counts = np.zeros(200, dtype=np.int64)
        counts[7] = 1
        pat = pp.PointPattern(points=g.cell_centers()[[7]], cell_counts=counts,
                              grid=g)
        ll = pp.log_likelihood(pp.AnalyticIntensity("constant", (2.5,)), f, pat)
        assert ll.value == pytest.approx(np.log(2.5) - 2.5 * 50.0)

    def test_zero_intensity_point_flags_minus_inf(self):
        g = _grid(50, 200)
        f = _uniform_field(50, 200)
        counts = np.zeros(200, dtype=np.int64)
        counts[10] = 2
        pat = pp.PointPattern(points=np.repeat(g.cell_centers()[[10]], 2, 0),
                              cell_counts=counts, grid=g)
        rho = pp.AnalyticIntensity("step", (0.0, 1.0, 0.5))
        ll = pp.log_likelihood(rho, f, pat)
        assert ll.value == -np.inf
        assert ll.n_zero_intensity_points == 2

    def test_tree_intensity_matches_factorised_form(self):
        g = _grid(256, 1024)
        k = cov.CovarianceKernel("squared-exponential", 1.0)
        f = cov.transform_cdf(cov.sample_gaussian_field(g, [k], 3))
        tree = build_partition(1, 4)
        mass = cov.pushforward(f, tree)
        rho0 = pp.AnalyticIntensity("linear", (1.0, 1.0))
        pat = pp.sample_cox(pp.intensity_raster(rho0, f), g, 4)
        counts = pp.bin_counts(pat, f, tree)
        hyper = pt.PolyaHyper.default(4)
        draw = pt.prior_sample(tree, mass, hyper, 7)
        ll = pp.log_likelihood(draw, f, pat)
        fact = pat.total * np.log(draw.rho_star) - draw.rho_star * f.n
        for lev in range(1, 5):
            yf = draw.yfac[lev - 1]
            cnt = counts.level_counts[lev]
            pos = cnt > 0
            fact += float(np.dot(cnt[pos], np.log(yf[pos])))
        assert ll.value == pytest.approx(fact, abs=1e-9)


class TestBinCounts:
    def test_empty_pattern_zero_counts(self):
        f = _uniform_field(16, 64)
        pat = pp.sample_cox(np.zeros(64), f.grid, 0)
        counts = pp.bin_counts(pat, f, build_partition(1, 3))
        assert all(c.sum() == 0 for c in counts.level_counts)

    def test_concentrated_values(self):
        g = _grid(16, 64)
        vals = np.full((64, 1), 0.1)
        f = cov.CovariateField(grid=g, dim_d=1, values=vals, generator={},
                               stationary_measure={})
        counts_cells = np.zeros(64, dtype=np.int64)
        counts_cells[:5] = 1
        pat = pp.PointPattern(points=g.cell_centers()[:5],
                              cell_counts=counts_cells, grid=g)
        counts = pp.bin_counts(pat, f, build_partition(1, 1))
        assert counts.level_counts[1][0] == 5
        assert counts.level_counts[1][1] == 0

    def test_additivity_every_level(self):
        g = _grid(128, 512)
        k = cov.CovarianceKernel("exponential", 0.5)
        f = cov.transform_cdf(cov.sample_gaussian_field(g, [k], 8))
        pat = pp.sample_cox(np.full(512, 2.0), g, 9)
        counts = pp.bin_counts(pat, f, build_partition(1, 5))
        for lev in range(1, 6):
            child = counts.level_counts[lev]
            parent = counts.level_counts[lev - 1]
            assert np.array_equal(child[0::2] + child[1::2], parent)
        assert counts.total == pat.total


def test_pattern_save_load_roundtrip(tmp_path):
    g = _grid(64, 128)
    pat = pp.sample_cox(np.full(128, 1.5), g, 42)
    pp.save_pattern(pat, tmp_path / "pattern", metadata={"note": "test"})
    back = pp.load_pattern(tmp_path / "pattern")
    assert back.total == pat.total
    assert np.allclose(back.points, pat.points)
    assert np.array_equal(back.cell_counts, pat.cell_counts)
