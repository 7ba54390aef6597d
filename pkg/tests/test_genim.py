import math

import numpy as np
import pytest
from scipy import stats as spstats

import mixedim as mx
from mixedim.errors import DomainError, UnboundedDenominator
from mixedim.genim import GenAssociation, gen_association, gen_contour, sup_denominator

from conftest import simulated_stats
from oracles import ks_distance_1d


def synthetic_assoc(s_head, lam_head, c1, c2, nu=4.0, center=0.0):
    return GenAssociation(center=center, nu=nu, s_head=np.asarray(s_head, float),
                          lam_head=np.asarray(lam_head, float), c1=c1, c2=c2)


class TestTTailContour:
    def test_peak_at_zero(self):
        assert mx.t_tail_contour(0.0, 7.0) == 1.0

    def test_quantile_roundtrip_nu29(self):
        t975 = spstats.t.ppf(0.975, 29)
        assert abs(mx.t_tail_contour(t975, 29) - 0.05) < 1e-10

    def test_nu3_value(self):
        # frozen from the t-CDF oracle: 2*sf(3.1824, 3) = 0.0500018
        assert abs(mx.t_tail_contour(3.1824, 3) - 0.0500018) < 1e-6

    def test_bad_nu(self):
        with pytest.raises(DomainError):
            mx.t_tail_contour(1.0, 0.0)


class TestSupDenominator:
    def test_constant_when_c1_matches(self):
        # c1 = lambda * c2 makes every term flat; sup sits at eta = 0
        assoc = synthetic_assoc([3.0, 5.0], [6.0, 6.0], c1=6.0 * 0.2, c2=0.2)
        eta_star, value = sup_denominator(assoc)
        assert eta_star == 0.0
        assert abs(value - float(assoc.denom(0.0))) < 1e-12
        assert abs(value - float(assoc.denom(17.3))) < 1e-9

    def test_monotone_increasing_sup_at_infinity(self):
        # c1 > lambda_1 c2 for every retained eigenvalue: terms all increase
        assoc = synthetic_assoc([2.0, 1.0], [2.0, 3.0], c1=10.0, c2=1.0)
        eta_star, value = sup_denominator(assoc)
        assert math.isinf(eta_star)
        assert abs(value - assoc.denom_limit()) < 1e-12

    def test_unbounded_head_eigenvalue(self):
        assoc = synthetic_assoc([2.0, 1.0], [2.0, 0.0], c1=1.0, c2=1.0)
        with pytest.raises(UnboundedDenominator):
            sup_denominator(assoc)

    @pytest.mark.parametrize("design,seed", [("A", 0), ("C", 3), ("D", 7)])
    def test_against_dense_grid_oracle(self, design, seed):
        _, stats_, _, _ = simulated_stats(design=design, seed=seed)
        consts = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0)
        assoc = gen_association(stats_, consts)
        _, value = sup_denominator(assoc)
        etas = np.concatenate([[0.0], np.geomspace(1e-9, 1e9, 1_000_000)])
        dense = float(assoc.denom(etas).max())
        dense = max(dense, assoc.denom_limit())
        assert value >= dense - 1e-6 * abs(dense)
        assert value <= dense * (1 + 1e-9) + 1e-12


class TestGenPlausibility:
    def test_center_is_one_every_mode(self, design_a_stats):
        consts = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0)
        center = float(design_a_stats.By[0])
        for mode in (mx.DenominatorMode.sup(), mx.DenominatorMode.plug_in(0.7),
                     mx.DenominatorMode.adjusted(0.7, 0.3)):
            assert mx.gen_plausibility(center, design_a_stats, consts, mode) == 1.0

    def test_sup_dominates_plugin(self, design_a_stats):
        consts = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0)
        rng = np.random.default_rng(5)
        center = float(design_a_stats.By[0])
        thetas = center + 8.0 * rng.standard_normal(1000)
        etas = rng.uniform(0.0, 50.0, 20)
        assoc = gen_association(design_a_stats, consts)
        sup_val = sup_denominator(assoc)[1]
        for eta in etas:
            plug_val = float(assoc.denom(eta))
            assert sup_val >= plug_val - 1e-12
        # pointwise contour dominance on a subsample (scales with denominator)
        for theta in thetas[:50]:
            p_sup = mx.gen_plausibility(theta, design_a_stats, consts,
                                        mx.DenominatorMode.sup())
            for eta in etas[:5]:
                p_plug = mx.gen_plausibility(theta, design_a_stats, consts,
                                             mx.DenominatorMode.plug_in(eta))
                assert p_sup >= p_plug - 1e-12

    def test_adjusted_zero_delta_is_plugin(self, design_a_stats):
        consts = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0)
        for theta in (-1.3, 0.2, 2.5):
            a = mx.gen_plausibility(theta, design_a_stats, consts,
                                    mx.DenominatorMode.adjusted(0.8, 0.0))
            b = mx.gen_plausibility(theta, design_a_stats, consts,
                                    mx.DenominatorMode.plug_in(0.8))
            assert a == b

    def test_contour_shape(self, design_a_stats):
        consts = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0)
        c = gen_contour(design_a_stats, consts, mx.DenominatorMode.sup())
        vals = [c.evaluate(c.center + d) for d in (0.0, 0.5, 1.0, 2.0, 5.0, 20.0)]
        assert vals[0] == 1.0
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-4
        sym = [abs(c.evaluate(c.center + d) - c.evaluate(c.center - d))
               for d in (0.7, 1.9)]
        assert max(sym) < 1e-12

    def test_alpha_cut_matches_closed_form(self, design_a_stats):
        consts = mx.PredictionConstants(c1=1.2, c2=1.0 / 30.0)
        for alpha in (0.05, 0.2):
            mode = mx.DenominatorMode.sup()
            via_cut = mx.alpha_cut(gen_contour(design_a_stats, consts, mode), alpha)
            closed = mx.gen_interval(design_a_stats, consts, mode, alpha)
            assert abs(via_cut.lower - closed.lower) < 1e-8
            assert abs(via_cut.upper - closed.upper) < 1e-8


class TestPivotality:
    def test_true_eta_plugin_is_student_t(self):
        # at the true ratio the studentized statistic is exactly t_nu
        sa2, se2 = 0.5, 0.5
        eta = sa2 / se2
        cfg = mx.StudyConfig(design="A", sigma_alpha2=sa2, sigma_eps2=se2, seed=31)
        template, _, _ = mx.generate_dataset(cfg, 0)
        spectrum = mx.spectral_summary(template)
        consts = mx.prediction_constants(template,
                                         mx.PredictionTarget.intercept_only())
        nu = float(spectrum.mults[:-1].sum())
        tvals = np.empty(2000)
        for k in range(2000):
            ds, theta, _ = mx.generate_dataset(cfg, k)
            st = mx.sufficient_stats(ds, spectrum)
            assoc = gen_association(st, consts)
            denom = float(assoc.denom(eta))
            tvals[k] = (theta - assoc.center) * math.sqrt(nu) / math.sqrt(denom)
        d = ks_distance_1d(tvals, lambda x: spstats.t.cdf(x, nu))
        assert d < 0.05
