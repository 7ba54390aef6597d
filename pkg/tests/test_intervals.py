import numpy as np
import pytest
from scipy import stats as spstats

import mixedim as mx
from mixedim.errors import BracketError, DomainError, EmptyCut
from mixedim.intervals import JOINT_ADJUSTED, Contour, alpha_cut


def t_contour(nu=29.0, center=0.0, scale=1.0):
    def evaluate(theta):
        return float(2 * spstats.t.sf(abs((theta - center) / scale), nu))
    return Contour(evaluate=evaluate, center=center, scale=scale)


class TestAlphaCut:
    def test_t29_quantile_cut(self):
        # oracle: the 0.05 cut of 2(1 - F_29(|t|)) is +- t_{29,0.975}
        want = spstats.t.ppf(0.975, 29)
        rep = alpha_cut(t_contour(), 0.05)
        assert abs(rep.lower + want) < 1e-7
        assert abs(rep.upper - want) < 1e-7
        assert rep.level == 0.95

    def test_shrinks_to_center(self):
        rep = alpha_cut(t_contour(center=2.5), 0.9999)
        assert abs(rep.lower - 2.5) < 1e-3
        assert abs(rep.upper - 2.5) < 1e-3

    @pytest.mark.parametrize("pair", [(0.02, 0.05), (0.05, 0.2), (0.1, 0.5)])
    def test_nesting(self, pair):
        a1, a2 = pair
        r1 = alpha_cut(t_contour(), a1)
        r2 = alpha_cut(t_contour(), a2)
        assert r1.lower <= r2.lower <= r2.upper <= r1.upper

    def test_empty_cut_surfaces(self):
        c = Contour(evaluate=lambda t: 0.3 * np.exp(-t * t), center=0.0, scale=1.0)
        with pytest.raises(EmptyCut):
            alpha_cut(c, 0.5)

    def test_joint_adjusted_cuts_at_double(self):
        nominal_wide = alpha_cut(t_contour(), 0.05)
        adjusted = alpha_cut(t_contour(), 0.05, level_mode=JOINT_ADJUSTED)
        straight_2a = alpha_cut(t_contour(), 0.10)
        assert adjusted.level == 0.95
        assert abs(adjusted.lower - straight_2a.lower) < 1e-7
        assert adjusted.length < nominal_wide.length

    def test_adjusted_level_domain(self):
        with pytest.raises(DomainError):
            alpha_cut(t_contour(), 0.6, level_mode=JOINT_ADJUSTED)

    def test_bad_alpha(self):
        with pytest.raises(DomainError):
            alpha_cut(t_contour(), 0.0)

    def test_non_monotone_falls_back_to_grid(self):
        base = t_contour(nu=5.0)

        def wiggly(theta):
            return min(1.0, base.evaluate(theta) + 0.2 * (abs(theta) > 1.4)
                       * (abs(theta) < 1.6))

        grid = np.linspace(-12, 12, 1201)
        c = Contour(evaluate=wiggly, center=0.0, scale=1.0,
                    grid_theta=grid, grid_pi=np.array([wiggly(t) for t in grid]))
        rep = alpha_cut(c, 0.05, mono_tol=1e-9)
        assert rep.diagnostics["path"] == "grid-isotonic"
        want = spstats.t.ppf(0.975, 5)
        assert rep.lower < -want < 0 < want < rep.upper
        assert rep.length < 3 * 2 * want

    def test_non_monotone_without_grid_raises(self):
        def wiggly(theta):
            return min(1.0, float(2 * spstats.t.sf(abs(theta), 5))
                       + 0.2 * (abs(theta) > 1.4) * (abs(theta) < 1.6))
        c = Contour(evaluate=wiggly, center=0.0, scale=1.0)
        with pytest.raises(BracketError):
            alpha_cut(c, 0.05, mono_tol=1e-9)

    def test_interval_report_roundtrip(self):
        rep = alpha_cut(t_contour(), 0.05, method="demo", kind="group-mean")
        d = rep.to_dict()
        assert d["method"] == "demo"
        assert d["kind"] == "group-mean"
        assert d["lower"] == rep.lower and d["upper"] == rep.upper

    def test_report_validation(self):
        with pytest.raises(DomainError):
            mx.IntervalReport(lower=1.0, upper=0.0, level=0.95, method="m", kind="")
        with pytest.raises(DomainError):
            mx.IntervalReport(lower=0.0, upper=1.0, level=1.5, method="m", kind="")
