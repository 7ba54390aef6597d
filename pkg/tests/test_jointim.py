import numpy as np
import pytest
from scipy import integrate

import mixedim as mx
from mixedim.errors import DomainError
from mixedim.jointim import (
    build_conditioner,
    default_rho_grid,
    log_density_uv,
    ratio_gradient,
    retarget_contour,
)

from conftest import simulated_stats
from oracles import direct_aux_pairs, ks_distance_1d, log_density_l2


def synthetic_stats(lambdas, mults, S, seed=0):
    """SuffStats with a hand-picked spectrum (identity eigenvector blocks)."""
    lambdas = np.asarray(lambdas, float)
    mults = np.asarray(mults, int)
    dim = int(mults.sum())
    n = dim + 1
    K = mx.projection_basis(np.ones((n, 1)))
    eye = np.eye(dim)
    blocks, start = [], 0
    for r in mults:
        blocks.append(eye[:, start:start + r])
        start += r
    spec = mx.Spectrum(lambdas=lambdas, mults=mults, P_blocks=tuple(blocks), K=K)
    return mx.SuffStats(By=np.zeros(1), S=np.asarray(S, float), spectrum=spec,
                        BBt=np.eye(1), BGBt=np.eye(1))


class TestConditioner:
    def test_l2_trivial(self, design_a_stats):
        cond = build_conditioner(0.4, design_a_stats)
        assert cond.M0.shape == (1, 0)
        assert cond.M0_prime.shape == (1, 1) and cond.M0_prime[0, 0] == 1.0
        assert cond.H_obs.size == 0
        # retained scalar is the single centred log ratio
        S = design_a_stats.S
        want = float(np.log((S[0] / S[1]) * (25.0 / 4.0))
                     - np.log((0.4 * 5 + 1) / (1 - 0.4)))
        assert abs(cond.u_obs - want) < 1e-12

    def test_l3_direction(self):
        st = synthetic_stats([6.0, 2.0, 0.0], [2, 3, 10], [5.0, 4.0, 9.0])
        cond = build_conditioner(0.3, st)
        assert cond.M0.shape == (2, 1)
        want = np.array([-2.0, 6.0]) / np.sqrt(40.0)
        cos = float(cond.M0[:, 0] @ want)
        assert abs(abs(cos) - 1.0) < 1e-12

    def test_gradient_matches_symbolic_and_rho_free_direction(self):
        import sympy as sp

        lam = (6.0, 2.0, 0.0)
        rho = sp.symbols("rho", positive=True)
        exprs = [(1 + rho * (l - 1)) / (1 + rho * (lam[-1] - 1)) for l in lam[:-1]]
        dfuns = [sp.lambdify(rho, sp.diff(e, rho)) for e in exprs]
        st = synthetic_stats(np.array(lam), [2, 3, 10], [5.0, 4.0, 9.0])
        cond = build_conditioner(0.5, st)
        base = None
        for r0 in (0.1, 0.3, 0.5, 0.7, 0.9):
            g_sym = np.array([f(r0) for f in dfuns])
            g_ana = ratio_gradient(r0, np.array(lam))
            np.testing.assert_allclose(g_ana, g_sym, rtol=1e-10)
            direction = g_sym / np.linalg.norm(g_sym)
            if base is None:
                base = direction
            np.testing.assert_allclose(direction, base, rtol=1e-10)
            assert np.abs(g_sym @ cond.M0).max() < 1e-10

    def test_orthogonality_any_rho(self, design_a_stats):
        st = synthetic_stats([9.0, 5.0, 4.0, 0.0], [1, 1, 2, 25],
                             [3.0, 2.0, 5.0, 20.0])
        for r0 in (0.05, 0.37, 0.93):
            cond = build_conditioner(r0, st)
            g = ratio_gradient(r0, st.spectrum.lambdas)
            assert np.abs(g @ cond.M0).max() < 1e-10

    def test_rho_domain(self, design_a_stats):
        for bad in (0.0, 1.0, -0.2, 1.7):
            with pytest.raises(DomainError):
                build_conditioner(bad, design_a_stats)


class TestLogDensity:
    def test_frozen_value_l2(self, design_a_stats):
        cond = build_conditioner(0.5, design_a_stats)
        got = log_density_uv(0.0, 0.0, cond, design_a_stats.spectrum)
        # -15 log(0.58), frozen from the closed formula
        assert abs(got - 8.170907631625083) < 1e-12

    def test_matches_independent_l2_formula(self, design_a_stats):
        cond = build_conditioner(0.3, design_a_stats)
        rng = np.random.default_rng(0)
        for _ in range(50):
            u, v = rng.uniform(-3, 3), rng.uniform(-6, 6)
            got = log_density_uv(u, v, cond, design_a_stats.spectrum)
            want = float(log_density_l2(u, v, (4.0, 25.0)))
            assert abs(got - want) < 1e-12

    def test_decreasing_in_abs_v(self, design_a_stats):
        cond = build_conditioner(0.5, design_a_stats)
        spec = design_a_stats.spectrum
        for u in (-1.0, 0.0, 2.0):
            vals = [log_density_uv(u, v, cond, spec) for v in (0.0, 0.5, 1.5, 4.0)]
            assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_symmetric_in_v(self, design_a_stats):
        cond = build_conditioner(0.5, design_a_stats)
        spec = design_a_stats.spectrum
        for u, v in ((0.3, 1.7), (-1.2, 0.4)):
            assert log_density_uv(u, v, cond, spec) == log_density_uv(u, -v, cond, spec)

    def test_overflow_guarded(self, design_a_stats):
        cond = build_conditioner(0.5, design_a_stats)
        got = log_density_uv(800.0, 1e6, cond, design_a_stats.spectrum)
        assert np.isfinite(got)

    def test_normalization_by_quadrature(self, design_a_stats):
        cond = build_conditioner(0.5, design_a_stats)
        spec = design_a_stats.spectrum

        def f(v, u):
            return np.exp(log_density_uv(u, v, cond, spec))

        z1, _ = integrate.dblquad(f, -18, 18, lambda u: -60, lambda u: 60,
                                  epsabs=1e-8)
        z2, _ = integrate.dblquad(f, -26, 26, lambda u: -90, lambda u: 90,
                                  epsabs=1e-8)
        assert np.isfinite(z1) and z1 > 0
        assert abs(z2 - z1) < 1e-6 * z1


class TestSampler:
    def test_determinism(self, design_a_stats):
        cond = build_conditioner(0.5, design_a_stats)
        spec = design_a_stats.spectrum
        d1 = mx.sample_aux(cond, spec, 2000, np.random.default_rng(17))
        d2 = mx.sample_aux(cond, spec, 2000, np.random.default_rng(17))
        np.testing.assert_array_equal(d1.u, d2.u)
        np.testing.assert_array_equal(d1.v, d2.v)

    def test_minimum_draws(self, design_a_stats):
        cond = build_conditioner(0.5, design_a_stats)
        with pytest.raises(DomainError):
            mx.sample_aux(cond, design_a_stats.spectrum, 500,
                          np.random.default_rng(0))

    def test_acceptance_and_v_symmetry(self, design_a_stats):
        cond = build_conditioner(0.5, design_a_stats)
        draws = mx.sample_aux(cond, design_a_stats.spectrum, 5000,
                              np.random.default_rng(3))
        assert 0.1 <= draws.acceptance_rate <= 0.6
        assert draws.tuning_ok
        # mean of v is zero by symmetry; autocorrelation-aware standard error
        se = draws.v.std(ddof=1) / np.sqrt(max(draws.ess_v, 1.0))
        assert abs(draws.v.mean()) < 3 * se

    def test_marginals_match_direct_simulation(self, design_a_stats):
        cond = build_conditioner(0.5, design_a_stats)
        draws = mx.sample_aux(cond, design_a_stats.spectrum, 20_000,
                              np.random.default_rng(5))
        ur, vr = direct_aux_pairs((4.0, 25.0), 200_000, np.random.default_rng(6))
        u_sorted = np.sort(ur)
        v_sorted = np.sort(vr)
        du = ks_distance_1d(draws.u, lambda x: np.searchsorted(u_sorted, x,
                                                               side="right") / ur.size)
        dv = ks_distance_1d(draws.v, lambda x: np.searchsorted(v_sorted, x,
                                                               side="right") / vr.size)
        assert du < 0.02
        assert dv < 0.02


class TestJointPlausibility:
    def test_far_theta_vanishes(self, design_a_stats):
        consts = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0)
        p = mx.joint_plausibility(1e4, 0.5, design_a_stats, consts, m=2000,
                                  rng=np.random.default_rng(0))
        assert p < 0.01

    def test_binomial_error_bound(self):
        # worst-case Monte Carlo standard error at the default draw count
        assert np.sqrt(0.25 / 5000) < 0.008

    def test_sample_reuse_consistency(self, design_a_stats):
        consts = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0)
        cond = build_conditioner(0.4, design_a_stats)
        draws = mx.sample_aux(cond, design_a_stats.spectrum, 2000,
                              np.random.default_rng(11))
        p1 = mx.joint_plausibility(0.7, 0.4, design_a_stats, consts, draws=draws)
        p2 = mx.joint_plausibility(0.7, 0.4, design_a_stats, consts, draws=draws)
        assert p1 == p2


class TestMarginalContour:
    def test_center_attains_grid_max(self, design_a_stats):
        consts = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0)
        c = mx.marginal_contour(design_a_stats, consts, m=2000,
                                rng=np.random.default_rng(2))
        assert c.evaluate(c.center) >= c.grid_pi.max() - 1e-12
        assert 0.0 <= c.grid_pi.min() and c.grid_pi.max() <= 1.0

    def test_monotone_away_from_center(self, design_a_stats):
        consts = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0)
        c = mx.marginal_contour(design_a_stats, consts, m=2000,
                                rng=np.random.default_rng(4))
        right = c.grid_pi[c.grid_theta >= c.center]
        left = c.grid_pi[c.grid_theta <= c.center]
        assert (np.diff(right) <= 1e-12).all()
        assert (np.diff(left) >= -1e-12).all()

    @pytest.mark.parametrize("design", ["A", "C"])
    def test_rho_grid_refinement_monotone(self, design):
        # value-keyed chain seeds: a nested grid shares draws at shared points,
        # so the profile maximum can only grow
        _, stats_, _, _ = simulated_stats(design=design, seed=8)
        consts = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0)
        grid1 = default_rho_grid(size=13)
        mids = 0.5 * (grid1[:-1] + grid1[1:])
        grid2 = np.sort(np.concatenate([grid1, mids]))
        c1 = mx.marginal_contour(stats_, consts, rho_grid=grid1, m=1000,
                                 rng=np.random.default_rng(55))
        c2 = mx.marginal_contour(stats_, consts, rho_grid=grid2, m=1000,
                                 rng=np.random.default_rng(55))
        probes = c1.center + np.array([-2.0, -0.5, 0.3, 1.1, 2.4])
        for t in probes:
            assert c2.evaluate(t) >= c1.evaluate(t) - 1e-12

    def test_retarget_shares_samples(self, design_a_stats):
        consts_gm = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0)
        consts_no = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0 + 1.0)
        c = mx.marginal_contour(design_a_stats, consts_gm, m=2000,
                                rng=np.random.default_rng(21))
        c2 = retarget_contour(c, design_a_stats, consts_no)
        assert c2.center == c.center
        # wider target variance pushes plausibility up at a fixed offset
        t = c.center + 1.5
        assert c2.evaluate(t) >= c.evaluate(t) - 1e-12

    def test_empty_grid_rejected(self, design_a_stats):
        consts = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0)
        with pytest.raises(DomainError):
            mx.marginal_contour(design_a_stats, consts, rho_grid=np.array([]),
                                m=1000, rng=np.random.default_rng(0))

    def test_validity_quick(self):
        # P(pi(theta, rho_true) <= alpha) <= alpha + 3 SE at alpha = 0.2
        sa2 = se2 = 0.5
        cfg = mx.StudyConfig(design="A", sigma_alpha2=sa2, sigma_eps2=se2, seed=61)
        template, _, _ = mx.generate_dataset(cfg, 0)
        spectrum = mx.spectral_summary(template)
        consts = mx.prediction_constants(template,
                                         mx.PredictionTarget.intercept_only())
        reps = 300
        hits = 0
        for k in range(reps):
            ds, theta, _ = mx.generate_dataset(cfg, k)
            st = mx.sufficient_stats(ds, spectrum)
            p = mx.joint_plausibility(theta, 0.5, st, consts, m=1000,
                                      rng=np.random.default_rng((61, k)))
            hits += p <= 0.2
        assert hits / reps <= 0.2 + 3 * np.sqrt(0.2 * 0.8 / reps)
