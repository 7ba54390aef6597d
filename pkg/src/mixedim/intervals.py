"""Turn plausibility contours into prediction intervals by level cuts.

A contour is any callable mapping a candidate target value to a plausibility
in [0, 1], maximized at a known center and decaying monotonically on each
side.  The 100(1-alpha)% prediction interval is the alpha super-level set,
found by geometric bracket expansion from the center and bisection.  Monte
Carlo contours may instead be cut on a cached grid after isotonic smoothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import isotonic_regression

from .errors import BracketError, DomainError, EmptyCut

__all__ = ["Contour", "IntervalReport", "alpha_cut", "NOMINAL", "JOINT_ADJUSTED"]

NOMINAL = "nominal"
JOINT_ADJUSTED = "joint-adjusted"


@dataclass
class Contour:
    """Evaluable plausibility contour with bracketing hints and optional grid cache."""

    evaluate: Callable[[float], float]
    center: float
    scale: float
    grid_theta: np.ndarray | None = None
    grid_pi: np.ndarray | None = None
    grid_argmax_rho: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class IntervalReport:
    """One prediction interval with its provenance."""

    lower: float
    upper: float
    level: float
    method: str
    kind: str
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise DomainError("interval endpoints out of order")
        if not 0.0 < self.level < 1.0:
            raise DomainError("level must be in (0, 1)")

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "kind": self.kind,
            "level": self.level,
            "lower": self.lower,
            "upper": self.upper,
            "diagnostics": self.diagnostics,
        }


def _find_crossing(evaluate, cut, inside, outside, tol):
    """Bisect between a point at-or-above the cut and one below it."""
    for _ in range(200):
        if abs(outside - inside) <= tol:
            break
        mid = 0.5 * (inside + outside)
        if evaluate(mid) >= cut:
            inside = mid
        else:
            outside = mid
    return 0.5 * (inside + outside)


def _side_cut(evaluate, center, scale, cut, direction, tol, mono_tol,
              max_expand=60, check_points=13):
    """Expand geometrically from the center, then bisect to the crossing."""
    h = scale
    for _ in range(max_expand):
        x = center + direction * h
        if evaluate(x) < cut:
            break
        h *= 2.0
    else:
        raise BracketError("contour never fell below the cut level while expanding")
    if check_points:
        probes = center + direction * h * np.linspace(0.0, 1.0, check_points + 2)[1:]
        vals = np.asarray([evaluate(p) for p in probes])
        if (np.diff(vals) > mono_tol).any():
            raise BracketError("contour is not monotone along the bracket")
    inside = center if h == scale else center + direction * (h / 2.0)
    return _find_crossing(evaluate, cut, inside, center + direction * h, tol)


def _grid_cut(contour: Contour, cut: float):
    """Cut a tabulated contour after isotonic smoothing away from the maximizer."""
    theta = np.asarray(contour.grid_theta, dtype=float)
    pi = np.asarray(contour.grid_pi, dtype=float)
    if theta.shape != pi.shape or theta.size < 3:
        raise BracketError("grid cache too small for a grid cut")
    k = int(np.argmax(pi))
    left = isotonic_regression(pi[: k + 1], increasing=True).x
    right = isotonic_regression(pi[k:], increasing=False).x
    smooth = np.concatenate([left, right[1:]])
    if smooth[k] < cut:
        raise EmptyCut("smoothed grid maximum below the cut level")

    def crossing(lo_idx, hi_idx, ascending):
        seg_t = theta[lo_idx:hi_idx + 1]
        seg_p = smooth[lo_idx:hi_idx + 1]
        if ascending:
            j = int(np.argmax(seg_p >= cut))
            a, b = j - 1, j
        else:
            below = np.nonzero(seg_p < cut)[0]
            j = int(below[0])
            a, b = j - 1, j
        p0, p1 = seg_p[a], seg_p[b]
        t0, t1 = seg_t[a], seg_t[b]
        if p1 == p0:
            return float(t0)
        return float(t0 + (cut - p0) * (t1 - t0) / (p1 - p0))

    if smooth[0] >= cut or smooth[-1] >= cut:
        raise BracketError("grid does not extend past the cut level; widen the grid")
    lower = crossing(0, k, ascending=True)
    upper = crossing(k, theta.size - 1, ascending=False)
    return lower, upper


def alpha_cut(contour: Contour, alpha: float, level_mode: str = NOMINAL,
              method: str = "contour", kind: str = "", mono_tol: float = 1e-9,
              tol_rel: float = 1e-8) -> IntervalReport:
    """Super-level-set prediction interval {theta : pi(theta) >= cut}.

    In the joint-adjusted mode the contour is cut at 2*alpha while the report
    still carries level 1 - alpha (a joint region for the pair behaves like
    two crossed intervals, so halving the joint confidence roughly preserves
    the marginal level).  An EmptyCut is surfaced, never silently widened.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must be in (0, 1)")
    if level_mode not in (NOMINAL, JOINT_ADJUSTED):
        raise DomainError(f"unknown level mode {level_mode!r}")
    cut = 2.0 * alpha if level_mode == JOINT_ADJUSTED else alpha
    if not cut < 1.0:
        raise DomainError("adjusted cut level reached 1; use a smaller alpha")

    center, scale = contour.center, contour.scale
    if not (np.isfinite(center) and np.isfinite(scale) and scale > 0):
        raise DomainError("contour needs a finite center and positive scale")
    pc = contour.evaluate(center)
    if pc < cut:
        raise EmptyCut(
            f"plausibility at the center is {pc:.4f} < cut {cut:.4f}; "
            "likely Monte Carlo undersampling, raise the sample count")

    tol = tol_rel * scale
    diagnostics = {"cut_level": cut, "level_mode": level_mode, "path": "bisection"}
    try:
        lower = _side_cut(contour.evaluate, center, scale, cut, -1.0, tol, mono_tol)
        upper = _side_cut(contour.evaluate, center, scale, cut, +1.0, tol, mono_tol)
    except BracketError:
        if contour.grid_theta is None or contour.grid_pi is None:
            raise
        lower, upper = _grid_cut(contour, cut)
        diagnostics["path"] = "grid-isotonic"
    return IntervalReport(lower=float(lower), upper=float(upper), level=1.0 - alpha,
                          method=method, kind=kind, diagnostics=diagnostics)
