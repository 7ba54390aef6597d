"""Closed-form generalized plausibility contour for the prediction target.

Dropping the smallest-eigenvalue sum of squares leaves a studentized pivot:
at the true variance ratio eta = sigma_alpha^2 / sigma_eps^2,

    (theta - x'By) * sqrt(nu) / sqrt( sum_{l<L} S_l (c1 eta + c2)/(lambda_l eta + 1) )

is exactly Student-t with nu = sum_{l<L} r_l degrees of freedom.  Replacing
the denominator by its supremum over eta >= 0 gives a contour that is valid
whatever the true ratio; plug-in and plus-or-minus-one-standard-error
variants trade that guarantee for shorter intervals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import intervals
from .errors import DomainError, UnboundedDenominator
from .model import PredictionConstants, SuffStats

__all__ = [
    "DenominatorMode",
    "GenAssociation",
    "gen_association",
    "t_tail_contour",
    "sup_denominator",
    "gen_plausibility",
    "gen_interval",
    "gen_contour",
]

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class DenominatorMode:
    """How the unknown variance ratio enters the denominator."""

    kind: str                  # "sup" | "plugin" | "adjusted"
    eta: float | None = None       # plug-in value (plugin mode)
    eta_hat: float | None = None   # point estimate (adjusted mode)
    delta: float | None = None     # one-standard-error offset (adjusted mode)

    @classmethod
    def sup(cls) -> "DenominatorMode":
        return cls(kind="sup")

    @classmethod
    def plug_in(cls, eta: float) -> "DenominatorMode":
        if eta < 0:
            raise DomainError("plug-in variance ratio must be >= 0")
        return cls(kind="plugin", eta=float(eta))

    @classmethod
    def adjusted(cls, eta_hat: float, delta: float) -> "DenominatorMode":
        if eta_hat < 0 or delta < 0:
            raise DomainError("adjusted mode needs eta_hat >= 0 and delta >= 0")
        return cls(kind="adjusted", eta_hat=float(eta_hat), delta=float(delta))

    def label(self) -> str:
        if self.kind == "plugin":
            return f"plugin(eta={self.eta:g})"
        if self.kind == "adjusted":
            return f"adjusted(eta_hat={self.eta_hat:g}, delta={self.delta:g})"
        return "sup"


@dataclass(frozen=True)
class GenAssociation:
    """Pieces of the studentized association for one dataset and target."""

    center: float          # x'By
    nu: float              # degrees of freedom, sum of retained multiplicities
    s_head: np.ndarray     # retained sums of squares S_1..S_{L-1}
    lam_head: np.ndarray   # matching eigenvalues
    c1: float
    c2: float

    def denom(self, eta) -> np.ndarray:
        """sum_l S_l (c1 eta + c2) / (lambda_l eta + 1), vectorized over eta."""
        scalar = np.ndim(eta) == 0
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        terms = self.s_head[:, None] * (self.c1 * eta[None, :] + self.c2) / (
            self.lam_head[:, None] * eta[None, :] + 1.0)
        out = terms.sum(axis=0)
        return float(out[0]) if scalar else out

    def denom_limit(self) -> float:
        """Limit of denom as eta -> infinity (finite when all lam_head > 0)."""
        total = 0.0
        for s, lam in zip(self.s_head, self.lam_head):
            if lam > 0:
                total += s * self.c1 / lam
            elif self.c1 > 0:
                return math.inf
            else:
                total += s * self.c2
        return float(total)


def gen_association(stats_: SuffStats, consts: PredictionConstants,
                    x: np.ndarray | None = None) -> GenAssociation:
    """Assemble the association; x defaults to the intercept-only covariate."""
    spec = stats_.spectrum
    if x is None:
        if stats_.By.shape[0] != 1:
            raise DomainError("x is required when the model has more than one coefficient")
        x = np.ones(1)
    center = float(np.asarray(x, dtype=float) @ stats_.By)
    return GenAssociation(
        center=center,
        nu=float(spec.mults[:-1].sum()),
        s_head=stats_.S[:-1],
        lam_head=spec.lambdas[:-1],
        c1=consts.c1,
        c2=consts.c2,
    )


def t_tail_contour(t: float, nu: float) -> float:
    """Maximum-specificity contour for a Student-t auxiliary: 2(1 - F_nu(|t|)).

    For a symmetric unimodal density, P(f(T) < f(t)) is exactly the two-sided
    tail probability, so no Monte Carlo is involved.
    """
    if nu <= 0:
        raise DomainError("degrees of freedom must be positive")
    return float(2.0 * stats.t.sf(abs(t), nu))


def _golden_max(fn, lo, hi, tol=1e-10):
    """Golden-section maximization on [lo, hi] to interval width tol."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = fn(d)
    x = 0.5 * (a + b)
    return x, fn(x)


def sup_denominator(assoc: GenAssociation, grid_points: int = 512) -> tuple[float, float]:
    """Global supremum of the denominator over eta in [0, infinity].

    Works on the compactified variable u = eta / (1 + eta): a coarse scan
    brackets the best stationary point, golden-section refines it to 1e-10
    in u, and both endpoints (eta = 0 and the eta -> infinity limit) are
    checked explicitly.  Returns (argmax eta, value); argmax may be inf.
    """
    if (assoc.lam_head <= 0).any() and assoc.c1 > 0:
        raise UnboundedDenominator(
            "a retained eigenvalue is zero, so the denominator grows without bound")

    def phi_u(u):
        return assoc.denom(u / (1.0 - u))

    at_zero = float(assoc.denom(0.0))
    at_inf = assoc.denom_limit()

    us = np.linspace(0.0, 1.0, grid_points, endpoint=False)
    vals = assoc.denom(us / (1.0 - us))
    k = int(np.argmax(vals))
    lo = us[max(k - 1, 0)]
    hi = us[min(k + 1, grid_points - 1)]
    u_star, v_star = _golden_max(phi_u, lo, hi)

    # near-ties break toward the smaller (finite) argument
    best_eta, best_val = 0.0, at_zero
    if v_star > best_val * (1.0 + 1e-12):
        best_eta, best_val = u_star / (1.0 - u_star), float(v_star)
    if at_inf > best_val * (1.0 + 1e-12):
        best_eta, best_val = math.inf, at_inf
    return best_eta, best_val


def _mode_denominator(assoc: GenAssociation, mode: DenominatorMode) -> float:
    if mode.kind == "sup":
        return sup_denominator(assoc)[1]
    if mode.kind == "plugin":
        return float(assoc.denom(mode.eta))
    if mode.kind == "adjusted":
        lo = max(0.0, mode.eta_hat - mode.delta)
        hi = mode.eta_hat + mode.delta
        return float(max(assoc.denom(lo), assoc.denom(hi)))
    raise DomainError(f"unknown denominator mode {mode.kind!r}")


def gen_plausibility(theta_val: float, stats_: SuffStats, consts: PredictionConstants,
                     mode: DenominatorMode, x: np.ndarray | None = None) -> float:
    """Generalized plausibility of a candidate target value."""
    assoc = gen_association(stats_, consts, x)
    denom = _mode_denominator(assoc, mode)
    t_prime = (theta_val - assoc.center) * math.sqrt(assoc.nu) / math.sqrt(denom)
    return t_tail_contour(t_prime, assoc.nu)


def gen_interval(stats_: SuffStats, consts: PredictionConstants, mode: DenominatorMode,
                 alpha: float, x: np.ndarray | None = None,
                 kind: str = "") -> intervals.IntervalReport:
    """Closed-form alpha-cut: center +- t_{nu,1-alpha/2} sqrt(denom / nu)."""
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must be in (0, 1)")
    assoc = gen_association(stats_, consts, x)
    denom = _mode_denominator(assoc, mode)
    half = stats.t.ppf(1.0 - alpha / 2.0, assoc.nu) * math.sqrt(denom / assoc.nu)
    return intervals.IntervalReport(
        lower=assoc.center - half, upper=assoc.center + half, level=1.0 - alpha,
        method=f"gen-im[{mode.label()}]", kind=kind,
        diagnostics={"nu": assoc.nu, "denominator": denom})


def gen_contour(stats_: SuffStats, consts: PredictionConstants, mode: DenominatorMode,
                x: np.ndarray | None = None) -> intervals.Contour:
    """Evaluable contour wrapper (the denominator is resolved once)."""
    assoc = gen_association(stats_, consts, x)
    denom = _mode_denominator(assoc, mode)
    root = math.sqrt(denom / assoc.nu)

    def evaluate(theta_val: float) -> float:
        return t_tail_contour((theta_val - assoc.center) / root, assoc.nu)

    return intervals.Contour(evaluate=evaluate, center=assoc.center, scale=root,
                             meta={"mode": mode.label(), "nu": assoc.nu,
                                   "denominator": denom})
