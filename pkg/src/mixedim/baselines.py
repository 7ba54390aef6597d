"""Variance-component estimation and the non-contour interval methods.

REML works on the residual-space likelihood of the spectral sums of squares:
maximize  -0.5 * sum_l [ r_l log(lambda_l s_a + s_e) + S_l / (lambda_l s_a + s_e) ]
by profiling the ratio eta = s_a / s_e; for fixed eta the residual variance
has the closed form  sum_l S_l / (lambda_l eta + 1) / sum_l r_l.  The profile
is scanned on a compactified grid and polished by golden section, with the
eta = 0 boundary admitted and flagged.

Interval methods: the oracle normal-theory interval (true variances), the
Student-t interval with N - 2 degrees of freedom and REML plug-ins, two
Satterthwaite-style constructions, parametric and stratified nonparametric
bootstrap percentiles, and the exact iid-normal interval.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats as spstats

from .errors import BoundaryWarning, DomainError, EstimationError, UsageError
from .intervals import IntervalReport
from .model import (
    Dataset,
    PredictionConstants,
    PredictionTarget,
    SuffStats,
    TargetKind,
)

__all__ = [
    "VarianceEstimate",
    "reml_fit",
    "reml_objective",
    "ORACLE",
    "STUDENT_T",
    "SATTERTHWAITE",
    "GEN_SATTERTHWAITE",
    "closed_form_interval",
    "parametric_bootstrap_draws",
    "parametric_bootstrap_interval",
    "stratified_bootstrap_pool",
    "nonparametric_bootstrap_interval",
    "bootstrap_se_eta",
    "iid_normal_interval",
]

ORACLE = "oracle"
STUDENT_T = "student-t"
SATTERTHWAITE = "satterthwaite"
GEN_SATTERTHWAITE = "gen-satterthwaite"

_BOUNDARY_ETA = 1e-10
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class VarianceEstimate:
    """REML estimates in all three parametrizations."""

    sigma_alpha2: float
    sigma_eps2: float
    eta_hat: float      # sigma_alpha2 / sigma_eps2
    rho_hat: float      # sigma_alpha2 / (sigma_alpha2 + sigma_eps2)
    converged: bool
    boundary: bool      # sigma_alpha2 pinned at zero


def reml_objective(sigma_alpha2: float, sigma_eps2: float, S: np.ndarray,
                   lambdas: np.ndarray, mults: np.ndarray) -> float:
    """Residual log-likelihood (up to a constant) at a variance pair."""
    d = lambdas * sigma_alpha2 + sigma_eps2
    if (d <= 0).any():
        return -math.inf
    return float(-0.5 * np.sum(mults * np.log(d) + S / d))


def _profile_objective_u(u: np.ndarray, S: np.ndarray, lam: np.ndarray,
                         r: np.ndarray) -> np.ndarray:
    """Profiled objective on the compactified ratio u = eta/(1+eta).

    S has shape (L, B); u has shape (B,).  Residual variance is profiled out
    in closed form.
    """
    eta = u / (1.0 - u)
    d = lam[:, None] * eta[None, :] + 1.0              # (L, B)
    R = r.sum()
    sig2 = (S / d).sum(axis=0) / R
    return -0.5 * (R * np.log(sig2) + (r[:, None] * np.log(d)).sum(axis=0))


def _profile_score(eta: np.ndarray, S: np.ndarray, lam: np.ndarray,
                   r: np.ndarray) -> np.ndarray:
    """Derivative of the profiled objective in eta (up to a positive factor).

    Positive below the maximizer and negative above it; evaluating the score
    avoids the cancellation that caps derivative-free search at sqrt(eps).
    """
    d = lam[:, None] * eta[None, :] + 1.0
    T = (S / d).sum(axis=0)
    Tp = (S * lam[:, None] / d ** 2).sum(axis=0)       # = -dT/deta
    return r.sum() * Tp / T - (r[:, None] * lam[:, None] / d).sum(axis=0)


def _reml_profile_batch(S: np.ndarray, lam: np.ndarray, r: np.ndarray,
                        grid_points: int = 97, golden_iters: int = 80):
    """Vectorized profile REML over the columns of S.

    Returns (eta, sigma_eps2, boundary) arrays.  A coarse grid on the
    compactified ratio brackets the maximizer, golden section refines it,
    and the eta = 0 endpoint is compared explicitly.
    """
    S = np.asarray(S, dtype=float)
    lam = np.asarray(lam, dtype=float)
    r = np.asarray(r, dtype=float)
    B = S.shape[1]
    if not np.isfinite(S).all() or (S <= 0).any():
        raise EstimationError("sums of squares must be finite and positive")

    eta_grid = np.concatenate([[0.0], np.geomspace(1e-8, 1e8, grid_points)])
    u_grid = eta_grid / (1.0 + eta_grid)
    d = lam[:, None] * eta_grid[None, :] + 1.0          # (L, G)
    R = r.sum()
    sig2_grid = np.tensordot(1.0 / d, S, axes=(0, 0)) / R        # (G, B)
    logdet = (r[:, None] * np.log(d)).sum(axis=0)                # (G,)
    vals = -0.5 * (R * np.log(sig2_grid) + logdet[:, None])      # (G, B)
    k = vals.argmax(axis=0)

    a = u_grid[np.maximum(k - 1, 0)]
    b = u_grid[np.minimum(k + 1, u_grid.size - 1)]
    for _ in range(golden_iters):
        c = b - _INV_PHI * (b - a)
        dpt = a + _INV_PHI * (b - a)
        fc = _profile_objective_u(c, S, lam, r)
        fd = _profile_objective_u(dpt, S, lam, r)
        take = fc >= fd
        b = np.where(take, dpt, b)
        a = np.where(take, a, c)
    # polish by sign-bisection of the score: golden section alone stalls at
    # sqrt(eps) because the objective is flat to second order at the maximum
    lo = np.maximum(0.5 * (a + b) / (1.0 - 0.5 * (a + b)) * 0.5, 0.0)
    hi = 0.5 * (a + b) / (1.0 - 0.5 * (a + b)) * 2.0 + 1e-8
    expand = _profile_score(lo, S, lam, r) <= 0
    lo = np.where(expand, 0.0, lo)
    for _ in range(60):
        above = _profile_score(hi, S, lam, r) > 0
        if not above.any():
            break
        hi = np.where(above, hi * 4.0, hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        pos = _profile_score(mid, S, lam, r) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
        if np.all((hi - lo) <= 1e-14 * np.maximum(1.0, hi)):
            break
    eta_star = 0.5 * (lo + hi)
    f_star = _profile_objective_u(eta_star / (1.0 + eta_star), S, lam, r)
    f_zero = _profile_objective_u(np.zeros(B), S, lam, r)
    boundary = f_zero >= f_star
    eta = np.where(boundary, 0.0, eta_star)
    dd = lam[:, None] * eta[None, :] + 1.0
    sig2 = (S / dd).sum(axis=0) / R
    eta = np.where(eta <= _BOUNDARY_ETA, 0.0, eta)
    return eta, sig2, eta == 0.0


def reml_fit(stats_: SuffStats) -> VarianceEstimate:
    """Profile REML point estimate from the spectral sums of squares."""
    spec = stats_.spectrum
    eta, sig2, boundary = _reml_profile_batch(
        stats_.S[:, None], spec.lambdas, spec.mults.astype(float), grid_points=257)
    eta, sig2 = float(eta[0]), float(sig2[0])
    if not (np.isfinite(eta) and np.isfinite(sig2) and sig2 > 0):
        raise EstimationError("profile REML did not produce a usable estimate")
    return VarianceEstimate(
        sigma_alpha2=eta * sig2,
        sigma_eps2=sig2,
        eta_hat=eta,
        rho_hat=eta / (1.0 + eta),
        converged=True,
        boundary=bool(boundary[0]),
    )


def _center(stats_: SuffStats, target: PredictionTarget) -> float:
    return float(target.x @ stats_.By)


def closed_form_interval(method: str, stats_: SuffStats, consts: PredictionConstants,
                         dataset: Dataset, target: PredictionTarget,
                         truth: tuple[float, float] | None = None,
                         alpha: float = 0.05,
                         reml: VarianceEstimate | None = None) -> IntervalReport:
    """Normal-theory and Student-t style intervals.

    oracle            center +- z_{1-a/2} sqrt(c1 s_a + c2 s_e) at the true pair
    student-t         same with REML plug-ins and t quantile, N - 2 df
    satterthwaite     moment-matched chi-square df for the total sum of squares
    gen-satterthwaite t interval on sqrt(c1 s_a^ + c2 s_e^) with df from
                      per-component chi-square matching (see docs)
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must be in (0, 1)")
    center = _center(stats_, target)
    spec = stats_.spectrum
    r = spec.mults.astype(float)
    diagnostics: dict = {}

    if method == ORACLE:
        if truth is None:
            raise UsageError("the oracle interval needs the true variance pair")
        sa2, se2 = truth
        half = spstats.norm.ppf(1.0 - alpha / 2.0) * math.sqrt(
            consts.c1 * sa2 + consts.c2 * se2)
        diagnostics["truth"] = [sa2, se2]
    else:
        if reml is None:
            reml = reml_fit(stats_)
        sa2, se2 = reml.sigma_alpha2, reml.sigma_eps2
        diagnostics["reml"] = {"sigma_alpha2": sa2, "sigma_eps2": se2,
                               "boundary": reml.boundary}
        plug = consts.c1 * sa2 + consts.c2 * se2
        if method == STUDENT_T:
            df = dataset.N - 2
            if df < 1:
                raise UsageError("Student-t interval needs at least 3 groups")
            half = spstats.t.ppf(1.0 - alpha / 2.0, df) * math.sqrt(plug)
            diagnostics["df"] = df
        elif method == SATTERTHWAITE:
            d_hat = spec.lambdas * sa2 + se2
            nu = float((r * d_hat).sum() ** 2 / (r * d_hat ** 2).sum())
            half = spstats.t.ppf(1.0 - alpha / 2.0, nu) * math.sqrt(
                plug * stats_.S.sum() / (r * d_hat).sum())
            diagnostics["df"] = nu
        elif method == GEN_SATTERTHWAITE:
            # per-component chi-square matching: the between part carries the
            # retained multiplicities, the residual part the smallest cluster
            nu_a = float(r[:-1].sum())
            nu_e = float(r[-1])
            denom = (consts.c1 * sa2) ** 2 / nu_a + (consts.c2 * se2) ** 2 / nu_e
            tau = plug ** 2 / denom if denom > 0 else nu_e
            half = spstats.t.ppf(1.0 - alpha / 2.0, tau) * math.sqrt(plug)
            diagnostics["df"] = tau
        else:
            raise UsageError(f"unknown closed-form method {method!r}")
    return IntervalReport(lower=center - half, upper=center + half,
                          level=1.0 - alpha, method=method,
                          kind=target.kind.value, diagnostics=diagnostics)


def _simulate_from_fit(dataset: Dataset, beta_hat: np.ndarray, sigma_alpha2: float,
                       sigma_eps2: float, B: int, rng: np.random.Generator) -> np.ndarray:
    """B synthetic response vectors from the fitted two-stage model, (n, B)."""
    mean = dataset.X @ beta_hat
    out = np.tile(mean[:, None], (1, B))
    chol_A = np.linalg.cholesky(dataset.A) * math.sqrt(max(sigma_alpha2, 0.0))
    for sl, z in zip(dataset.group_slices, dataset.Z_blocks):
        alpha_draw = chol_A @ rng.standard_normal((dataset.a, B))
        out[sl, :] += z @ alpha_draw
    out += math.sqrt(sigma_eps2) * rng.standard_normal((dataset.n, B))
    return out


def _batch_stats(dataset: Dataset, stats_: SuffStats, Y: np.ndarray):
    """Sums of squares (L, B) and coefficient estimates (p, B) for many responses."""
    spec = stats_.spectrum
    S = np.stack([np.sum((q.T @ Y) ** 2, axis=0) for q in spec.Q_blocks])
    XtX = dataset.X.T @ dataset.X
    By = np.linalg.solve(XtX, dataset.X.T @ Y)
    return S, By


def parametric_bootstrap_draws(dataset: Dataset, stats_: SuffStats,
                               consts: PredictionConstants, B: int,
                               rng: np.random.Generator,
                               target: PredictionTarget | None = None,
                               reml: VarianceEstimate | None = None):
    """Simulated plug-in predictions theta_b plus diagnostics.

    Each of the B resamples is drawn from the REML-fitted model and refitted;
    the resample's prediction combines its own center estimate with a fresh
    standard normal scaled by its own plug-in predictive standard deviation.
    Degenerate resamples are dropped; more than 10% of them is an error.
    """
    if target is None:
        target = PredictionTarget.intercept_only()
    if reml is None:
        reml = reml_fit(stats_)
    spec = stats_.spectrum
    Y = _simulate_from_fit(dataset, stats_.By, reml.sigma_alpha2, reml.sigma_eps2, B, rng)
    S, By = _batch_stats(dataset, stats_, Y)
    total = S.sum(axis=0)
    good = np.isfinite(total) & (total > 0) & (S > 1e-12 * total[None, :]).all(axis=0)
    n_fail = int(B - good.sum())
    if n_fail > 0.1 * B:
        raise EstimationError(f"{n_fail} of {B} bootstrap refits degenerate")
    eta_b, sig2_b, boundary_b = _reml_profile_batch(
        S[:, good], spec.lambdas, spec.mults.astype(float))
    centers = target.x @ By[:, good]
    z = rng.standard_normal(int(good.sum()))
    sd = np.sqrt(consts.c1 * eta_b * sig2_b + consts.c2 * sig2_b)
    theta_b = centers + z * sd
    diagnostics = {"B": B, "failures": n_fail,
                   "boundary_fraction": float(boundary_b.mean()),
                   "reml": {"sigma_alpha2": reml.sigma_alpha2,
                            "sigma_eps2": reml.sigma_eps2}}
    return theta_b, diagnostics


def parametric_bootstrap_interval(dataset: Dataset, stats_: SuffStats,
                                  consts: PredictionConstants, B: int, alpha: float,
                                  rng: np.random.Generator,
                                  target: PredictionTarget | None = None,
                                  reml: VarianceEstimate | None = None) -> IntervalReport:
    """Percentile interval of the simulated plug-in predictions."""
    if B < 500:
        raise UsageError("parametric bootstrap needs at least 500 resamples")
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must be in (0, 1)")
    if target is None:
        target = PredictionTarget.intercept_only()
    theta_b, diagnostics = parametric_bootstrap_draws(dataset, stats_, consts, B,
                                                      rng, target, reml)
    lo, hi = np.quantile(theta_b, [alpha / 2.0, 1.0 - alpha / 2.0])
    return IntervalReport(lower=float(lo), upper=float(hi), level=1.0 - alpha,
                          method="param-boot", kind=target.kind.value,
                          diagnostics=diagnostics)


def stratified_bootstrap_pool(dataset: Dataset, B: int, rng: np.random.Generator,
                              kind: TargetKind = TargetKind.GROUP_MEAN) -> np.ndarray:
    """Pooled bootstrap distribution from within-group resampling.

    Rows are resampled with replacement inside each group.  For a group-mean
    target the pool collects the within-group resample means across groups
    and resamples; for a new observation it pools the raw resampled
    responses.  Group values are sorted before index resampling, so the pool
    is invariant under within-group row permutations.
    """
    if B < 1:
        raise UsageError("need at least one bootstrap resample")
    if not dataset.is_random_intercept:
        raise UsageError("stratified bootstrap is defined for random-intercept data")
    pooled = []
    for sl in dataset.group_slices:
        vals = np.sort(dataset.y[sl])
        n_i = vals.shape[0]
        if n_i == 1:
            warnings.warn("group of size 1: resample is the single point",
                          BoundaryWarning, stacklevel=2)
        draws = vals[rng.integers(0, n_i, size=(B, n_i))]
        pooled.append(draws.mean(axis=1) if kind is TargetKind.GROUP_MEAN
                      else draws.ravel())
    return np.concatenate(pooled)


def nonparametric_bootstrap_interval(dataset: Dataset, B: int, alpha: float,
                                     rng: np.random.Generator,
                                     kind: TargetKind = TargetKind.GROUP_MEAN,
                                     ) -> IntervalReport:
    """Percentile interval of the stratified within-group bootstrap pool."""
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must be in (0, 1)")
    pool = stratified_bootstrap_pool(dataset, B, rng, kind)
    lo, hi = np.quantile(pool, [alpha / 2.0, 1.0 - alpha / 2.0])
    return IntervalReport(lower=float(lo), upper=float(hi), level=1.0 - alpha,
                          method="nonpar-boot", kind=kind.value,
                          diagnostics={"B": B, "pool_size": int(pool.shape[0])})


def _stratified_resample_matrix(dataset: Dataset, B: int,
                                rng: np.random.Generator) -> np.ndarray:
    cols = []
    for sl in dataset.group_slices:
        vals = np.sort(dataset.y[sl])
        cols.append(vals[rng.integers(0, vals.shape[0], size=(vals.shape[0], B))])
    return np.concatenate(cols, axis=0)


def bootstrap_se_eta(dataset: Dataset, stats_: SuffStats, B: int = 100,
                     rng: np.random.Generator | None = None,
                     reml: VarianceEstimate | None = None,
                     resampling: str = "parametric") -> float:
    """Bootstrap standard error of the REML variance ratio.

    resampling="parametric" refits draws from the fitted model;
    resampling="stratified" refits within-group case resamples (the flavor
    the adjusted contour uses; it tracks the ratio's sampling spread without
    the heavy right tail the parametric generator produces at large ratios).
    """
    if B < 2:
        raise UsageError("need at least two resamples for a standard error")
    if rng is None:
        rng = np.random.default_rng()
    if reml is None:
        reml = reml_fit(stats_)
    spec = stats_.spectrum
    if resampling == "parametric":
        Y = _simulate_from_fit(dataset, stats_.By, reml.sigma_alpha2,
                               reml.sigma_eps2, B, rng)
    elif resampling == "stratified":
        Y = _stratified_resample_matrix(dataset, B, rng)
    else:
        raise UsageError(f"unknown resampling flavor {resampling!r}")
    S, _ = _batch_stats(dataset, stats_, Y)
    total = S.sum(axis=0)
    good = np.isfinite(total) & (total > 0) & (S > 1e-12 * total[None, :]).all(axis=0)
    if good.sum() < 2:
        raise EstimationError("too few usable bootstrap refits")
    eta_b, _, boundary_b = _reml_profile_batch(
        S[:, good], spec.lambdas, spec.mults.astype(float))
    if boundary_b.all():
        warnings.warn("every bootstrap refit hit the eta = 0 boundary",
                      BoundaryWarning, stacklevel=2)
        return 0.0
    return float(np.std(eta_b, ddof=1))


def iid_normal_interval(y: np.ndarray, alpha: float) -> IntervalReport:
    """Exact prediction interval for one future draw from an iid normal sample.

    ybar +- t_{n-1, 1-a/2} sqrt(s^2 (1 + 1/n)); identical to the alpha-cut of
    the Student-t tail contour centred at ybar with that scale.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] < 2:
        raise UsageError("need a one-dimensional sample of size at least 2")
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must be in (0, 1)")
    n = y.shape[0]
    ybar = float(y.mean())
    s2 = float(y.var(ddof=1))
    half = spstats.t.ppf(1.0 - alpha / 2.0, n - 1) * math.sqrt(s2 * (1.0 + 1.0 / n))
    return IntervalReport(lower=ybar - half, upper=ybar + half, level=1.0 - alpha,
                          method="iid-normal", kind="new-obs",
                          diagnostics={"n": n, "s2": s2, "df": n - 1})
