import numpy as np
import pytest

from coxcov import covariates as cov
from coxcov import gpprior as gp
from coxcov import pointproc as pp
from coxcov.geometry import Grid, Window


def _basis(family="haar", d=1, L=4):
    return gp.WaveletBasis(family=family, dim_d=d, max_level=L)


class TestBasis:
    def test_level_sizes(self):
        b = _basis(L=5)
        assert [b.level_size(l) for l in range(1, 6)] == [1, 2, 4, 8, 16]
        b2 = _basis(d=2, L=3)
        assert [b2.level_size(l) for l in range(1, 4)] == [3, 12, 48]
        assert b2.total_size(3) == 63

    def test_haar_level1_is_mother_wavelet(self):
        b = _basis(L=1)
        z = np.array([[0.2], [0.7], [1.0]])
        vals = b.eval_level(1, z)
        assert vals.shape == (3, 1)
        assert vals[:, 0] == pytest.approx([1.0, -1.0, -1.0])

    def test_haar_orthonormal_gram(self):
        b = _basis(L=4)
        m = 2**12
        z = ((np.arange(m) + 0.5) / m)[:, None]
        blocks = [b.eval_level(l, z) for l in range(1, 5)]
        B = np.concatenate(blocks, axis=1)
        gram = B.T @ B / m
        assert np.abs(gram - np.eye(B.shape[1])).max() < 1e-10

    def test_haar_tensor_matches_factor_products(self):
        b = _basis(d=2, L=3)
        rng = np.random.default_rng(0)
        Z = rng.uniform(size=(1000, 2))
        for level in (1, 2, 3):
            j = level - 1
            dense = b.eval_level(level, Z)
            k = np.arange(2**j)
            from coxcov.gpprior import _haar_phi, _haar_psi
            phis = [_haar_phi(j, k[None, :], Z[:, h][:, None]) for h in (0, 1)]
            psis = [_haar_psi(j, k[None, :], Z[:, h][:, None]) for h in (0, 1)]
            # pattern blocks: 01 -> phi x psi, 10 -> psi x phi, 11 -> psi x psi
            blocks = []
            for pat in (1, 2, 3):
                f0 = psis[0] if pat & 2 else phis[0]
                f1 = psis[1] if pat & 1 else phis[1]
                outer = (f0[:, :, None] * f1[:, None, :]).reshape(len(Z), -1)
                blocks.append(outer)
            want = np.concatenate(blocks, axis=1)
            assert np.abs(dense - want).max() < 1e-12

    def test_haar_level_dot_matches_dense(self):
        b = _basis(d=2, L=3)
        rng = np.random.default_rng(1)
        Z = rng.uniform(size=(500, 2))
        for level in (1, 2, 3):
            g = rng.standard_normal(b.level_size(level))
            dense = b.eval_level(level, Z) @ g
            fast = b.level_dot(level, Z, g)
            assert np.abs(dense - fast).max() < 1e-10

    def test_db4_orthonormal_within_tolerance(self):
        b = _basis("db4-periodized", L=3)
        m = 2**12
        z = ((np.arange(m) + 0.5) / m)[:, None]
        B = np.concatenate([b.eval_level(l, z) for l in range(1, 4)], axis=1)
        gram = B.T @ B / m
        assert np.abs(gram - np.eye(B.shape[1])).max() < 2e-2

    def test_db4_integrates_to_zero(self):
        b = _basis("db4-periodized", L=2)
        m = 2**12
        z = ((np.arange(m) + 0.5) / m)[:, None]
        B = np.concatenate([b.eval_level(l, z) for l in (1, 2)], axis=1)
        assert np.abs(B.mean(axis=0)).max() < 2e-2


class TestLinks:
    def test_exp_and_sigmoid_values(self):
        state0 = gp.prior_sample_wavelet(_basis(L=1), 1.0, 1, 0)
        zeroed = gp.WaveletState(basis=state0.basis, smoothness_alpha=1.0,
                                 level=1, coeffs=(np.zeros(1),),
                                 link=gp.ExpLink())
        z = np.array([[0.3]])
        assert gp.eval_rho(zeroed, z)[0] == pytest.approx(1.0)
        sig = gp.WaveletState(basis=state0.basis, smoothness_alpha=1.0,
                              level=1, coeffs=(np.zeros(1),),
                              link=gp.ScaledSigmoidLink(M1=4.0))
        assert gp.eval_rho(sig, z)[0] == pytest.approx(2.0)

    def test_ramp_linear_region(self):
        link = gp.MollifiedRampLink()
        assert float(link(10.0)) == pytest.approx(11.0, abs=1e-6)

    def test_ramp_against_direct_convolution(self):
        # independent convolution oracle on a fine trapezoid grid
        link = gp.MollifiedRampLink()
        t = np.linspace(-1, 1, 20_001)
        h = np.exp(-1.0 / np.clip(1 - t**2, 1e-300, None))
        h[0] = h[-1] = 0.0
        h /= np.trapezoid(h, t)
        for u in (-3.0, -0.5, 0.0, 0.7, 2.5):
            g = np.where(u - t < 0, 1.0 / (1.0 - (u - t)), 1.0 + (u - t))
            want = np.trapezoid(h * g, t)
            assert float(link(u)) == pytest.approx(want, abs=1e-6)

    def test_links_positive_increasing(self):
        u = np.linspace(-40, 40, 10_000)
        for link in (gp.ExpLink(), gp.ScaledSigmoidLink(3.0),
                     gp.MollifiedRampLink()):
            v = link(u)
            assert np.all(v > 0)
            assert np.all(np.diff(v) >= 0)
            assert np.all(link.deriv(u) >= 0)

    def test_sigmoid_bounded(self):
        link = gp.ScaledSigmoidLink(M1=4.0)
        assert float(link(100.0)) <= 4.0

    def test_ramp_left_tail_bound(self):
        link = gp.MollifiedRampLink()
        assert link.tail_bound_margin() >= 0.0


class TestWaveletState:
    def test_single_term_variance(self):
        b = _basis(L=1)
        alpha = 1.3
        draws = np.array([gp.prior_sample_wavelet(b, alpha, 1, s)
                          .field(np.array([[0.2]]))[0] for s in range(4000)])
        want = 2.0 ** (-2 * (alpha + 0.5))
        se = want * np.sqrt(2.0 / len(draws))
        assert abs(draws.var() - want) < 3 * se

    def test_prior_variance_formula(self):
        b = _basis(L=4)
        alpha = 0.8
        rng = np.random.default_rng(3)
        zs = rng.uniform(size=(5, 1))
        want = gp.prior_variance_at(b, alpha, 4, zs)
        reps = 100_000
        gmat = np.random.default_rng(5).standard_normal((reps, b.total_size(4)))
        cols = np.concatenate(
            [2.0 ** (-l * (alpha + 0.5)) * b.eval_level(l, zs)
             for l in range(1, 5)], axis=1)
        W = gmat @ cols.T
        got = W.var(axis=0)
        se = want * np.sqrt(2.0 / reps)
        assert np.all(np.abs(got - want) < 4 * se)

    def test_same_seed_identical(self):
        b = _basis(L=3)
        a = gp.prior_sample_wavelet(b, 1.0, 3, 42)
        c = gp.prior_sample_wavelet(b, 1.0, 3, 42)
        for x, y in zip(a.coeffs, c.coeffs):
            assert np.array_equal(x, y)

    def test_positive_everywhere(self):
        b = _basis(L=4)
        state = gp.prior_sample_wavelet(b, 0.5, 4, 7,
                                        link=gp.MollifiedRampLink())
        z = np.linspace(0, 1, 500)[:, None]
        assert np.all(state(z) > 0)


class TestPCN:
    def test_constant_likelihood_accepts_everything(self):
        b = _basis(L=3)
        init = gp.prior_sample_wavelet(b, 1.0, 3, 0)
        res = gp.pcn_chain(init, gp.ConstantTarget(), 0.5, 400, 1)
        assert res.acceptance_rate == 1.0

    def test_prior_invariance_second_moment(self):
        b = _basis(L=3)
        alpha = 1.0
        init = gp.prior_sample_wavelet(b, alpha, 3, 0)
        res = gp.pcn_chain(init, gp.ConstantTarget(), 0.8, 30_000, 2, thin=10)
        zs = np.array([[0.23], [0.55], [0.81]])
        W = np.stack([s.field(zs) for s in res.states])
        want = gp.prior_variance_at(b, alpha, 3, zs)
        n_eff = len(W)
        got = W.var(axis=0)
        se = want * np.sqrt(2.0 / n_eff)
        assert np.all(np.abs(got - want) < 4 * se)

    def test_prior_invariance_ks(self):
        from scipy.stats import norm
        b = _basis(L=2)
        init = gp.prior_sample_wavelet(b, 1.0, 2, 3)
        res = gp.pcn_chain(init, gp.ConstantTarget(), 0.9, 40_000, 4, thin=20)
        z = np.array([[0.4]])
        W = np.array([s.field(z)[0] for s in res.states])
        sd = np.sqrt(gp.prior_variance_at(b, 1.0, 2, z)[0])
        u = np.sort(norm.cdf(W / sd))
        m = len(u)
        ks = np.abs(u - (np.arange(1, m + 1) - 0.5) / m).max()
        assert ks < 1.63 / np.sqrt(m)

    def test_small_beta_barely_moves(self):
        b = _basis(L=2)
        init = gp.prior_sample_wavelet(b, 1.0, 2, 5)
        res = gp.pcn_chain(init, gp.ConstantTarget(), 0.01, 2000, 6, thin=1)
        assert res.acceptance_rate == 1.0
        z = np.array([[0.3]])
        W = np.array([s.field(z)[0] for s in res.states])
        lag1 = np.corrcoef(W[:-1], W[1:])[0, 1]
        assert lag1 > 0.98

    def test_rejects_infinite_start(self):
        b = _basis(L=2)
        init = gp.prior_sample_wavelet(b, 1.0, 2, 0)
        with pytest.raises(gp.GPError):
            gp.pcn_chain(init, lambda s: -np.inf, 0.5, 10, 0)

    def test_deterministic_chains(self):
        b = _basis(L=3)
        init = gp.prior_sample_wavelet(b, 1.0, 3, 0)
        g1 = Grid(Window(1, 64.0), 256)
        k = cov.CovarianceKernel("squared-exponential", 1.0)
        f = cov.transform_cdf(cov.sample_gaussian_field(g1, [k], 1))
        pat = pp.sample_cox(np.full(256, 2.0), g1, 2)
        target = gp.CoxWaveletLogLik(f, pat, b)
        r1 = gp.pcn_chain(init, target, 0.4, 300, 9, thin=10)
        r2 = gp.pcn_chain(init, target, 0.4, 300, 9, thin=10)
        assert np.array_equal(r1.logliks, r2.logliks)
        for s1, s2 in zip(r1.states, r2.states):
            for c1, c2 in zip(s1.coeffs, s2.coeffs):
                assert np.array_equal(c1, c2)

    def test_sufficient_stats_match_generic_loglik(self):
        b = _basis(L=4)
        g1 = Grid(Window(1, 128.0), 512)
        k = cov.CovarianceKernel("squared-exponential", 1.0)
        f = cov.transform_cdf(cov.sample_gaussian_field(g1, [k], 8))
        pat = pp.sample_cox(np.full(512, 2.0), g1, 9)
        target = gp.CoxWaveletLogLik(f, pat, b)
        state = gp.prior_sample_wavelet(b, 1.0, 4, 11,
                                        link=gp.ScaledSigmoidLink(4.0))
        want = pp.log_likelihood(state, f, pat).value
        assert target(state) == pytest.approx(want, rel=1e-12)


class TestLevelMoves:
    def test_level_prior_normalised(self):
        lp = gp.LevelPrior(C_L=0.1, dim_d=1, min_level=1, max_level=4)
        assert np.exp(lp.log_mass()).sum() == pytest.approx(1.0)

    def test_death_at_support_floor_rejected(self):
        b = _basis(L=4)
        lp = gp.LevelPrior(C_L=0.1, dim_d=1, min_level=1, max_level=4)
        state = gp.prior_sample_wavelet(b, 1.0, 1, 0)
        rng = np.random.default_rng(3)
        for _ in range(50):
            new, accepted = gp.level_move(state, lp, gp.ConstantTarget(), rng)
            assert new.level >= 1
            state = new

    def test_birth_then_death_restores_lower_levels(self):
        b = _basis(L=4)
        lp = gp.LevelPrior(C_L=1e-9, dim_d=1, min_level=1, max_level=4)
        state = gp.prior_sample_wavelet(b, 1.0, 2, 1)
        rng = np.random.default_rng(0)
        grown, ok = gp.level_move(state, lp, gp.ConstantTarget(), rng)
        while grown.level != 3:
            grown, ok = gp.level_move(grown if ok else state, lp,
                                      gp.ConstantTarget(), rng)
        shrunk = grown
        while shrunk.level != 2:
            shrunk, _ = gp.level_move(shrunk, lp, gp.ConstantTarget(), rng)
        for c1, c2 in zip(state.coeffs, shrunk.coeffs):
            assert np.array_equal(c1, c2)

    def test_stationary_distribution_chi2(self):
        # constant likelihood: the level chain must recover its prior
        from scipy.stats import chi2
        b = _basis(L=4)
        lp = gp.LevelPrior(C_L=0.1, dim_d=1, min_level=1, max_level=4)
        state = gp.prior_sample_wavelet(b, 1.0, 1, 2)
        rng = np.random.default_rng(7)
        moves = 200_000
        thin = 25
        levels = np.empty(moves // thin, dtype=int)
        for i in range(moves):
            state, _ = gp.level_move(state, lp, gp.ConstantTarget(), rng)
            if (i + 1) % thin == 0:
                levels[i // thin] = state.level
        counts = np.bincount(levels, minlength=5)[1:5]
        expected = np.exp(lp.log_mass()) * len(levels)
        stat = ((counts - expected) ** 2 / expected).sum()
        assert stat < chi2.ppf(0.99, df=3)


class TestTuning:
    def test_tuned_beta_hits_band(self):
        b = _basis(L=4)
        g1 = Grid(Window(1, 256.0), 1024)
        k = cov.CovarianceKernel("squared-exponential", 1.0)
        f = cov.transform_cdf(cov.sample_gaussian_field(g1, [k], 3))
        pat = pp.sample_cox(np.full(1024, 2.0), g1, 4)
        target = gp.CoxWaveletLogLik(f, pat, b)
        init = gp.prior_sample_wavelet(b, 1.0, 4, 5,
                                       link=gp.ScaledSigmoidLink(4.0))
        beta, warm = gp.tune_pcn_beta(init, target, 6)
        res = gp.pcn_chain(warm, target, beta, 2000, 7)
        assert 0.10 <= res.acceptance_rate <= 0.5


def test_chain_persistence(tmp_path):
    b = _basis(L=2)
    init = gp.prior_sample_wavelet(b, 1.0, 2, 0)
    res = gp.pcn_chain(init, gp.ConstantTarget(), 0.5, 100, 1, thin=10)
    gp.save_chain(res, tmp_path / "chain", snapshot_every=50)
    lines = (tmp_path / "chain.jsonl").read_text().strip().splitlines()
    assert len(lines) == 100
    import json
    rec = json.loads(lines[0])
    assert set(rec) == {"iteration", "level", "loglik", "accepted"}
    snaps = np.load(tmp_path / "chain_snapshots.npz")
    assert len(snaps.files) == 2
