"""Joint plausibility for (target, intra-class correlation) and its marginal contour.

For a reference correlation rho0 the sums-of-squares ratio equations are
reduced to a single scalar by conditioning on their projection onto a basis
orthogonal to the rho-gradient of the ratio means.  What remains is a
two-dimensional auxiliary pair (u, v) with a closed-form conditional density
(up to a constant), sampled here by adaptive random-walk Metropolis.  The
pairwise plausibility compares the density at the observed pair against the
sampled density values; the marginal contour for the target maximizes over a
grid of reference correlations, reusing each grid point's samples for every
candidate target value.

Scaling conventions (used consistently for observed statistics, conditioning
values and the density):

  u_l = log[(S_l / S_L)(r_L / r_l)] - log[(rho0(lambda_l - 1) + 1)/(rho0(lambda_L - 1) + 1)]
  v   = sqrt(r_L) * (theta - x'By) / sqrt(S_L) * sqrt[(rho0(lambda_L-1)+1)/(rho0(c1-c2)+c2)]

with the retained scalar being the first component u_1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space

from . import intervals
from .errors import DomainError, TuningFailure
from .model import PredictionConstants, Spectrum, SuffStats

__all__ = [
    "LocalConditioner",
    "AuxDraws",
    "ratio_gradient",
    "build_conditioner",
    "log_density_uv",
    "sample_aux",
    "joint_plausibility",
    "marginal_contour",
    "retarget_contour",
    "default_rho_grid",
]

DEFAULT_RHO_GRID_SIZE = 100
DEFAULT_RHO_BOUNDS = (0.001, 0.999)
DEFAULT_DRAWS = 5000
DEFAULT_BURN = 1000
_TARGET_ACCEPT = 0.3
_ACCEPT_RANGE = (0.1, 0.6)


def default_rho_grid(size: int = DEFAULT_RHO_GRID_SIZE,
                     bounds: tuple[float, float] = DEFAULT_RHO_BOUNDS) -> np.ndarray:
    """Equally spaced reference-correlation grid."""
    return np.linspace(bounds[0], bounds[1], size)


def ratio_gradient(rho: float, lambdas: np.ndarray) -> np.ndarray:
    """d/drho of the ratio means: (lambda_l - lambda_L) / (1 + rho(lambda_L - 1))^2.

    The direction never depends on rho, so one orthogonal basis serves the
    whole reference grid.
    """
    lam = np.asarray(lambdas, dtype=float)
    return (lam[:-1] - lam[-1]) / (1.0 + rho * (lam[-1] - 1.0)) ** 2


@dataclass(frozen=True)
class LocalConditioner:
    """Conditioning pieces for one reference correlation value."""

    rho0: float
    M0: np.ndarray            # (L-1, L-2) orthonormal, orthogonal to the gradient
    M0_prime: np.ndarray      # (L-1, L-1): e1 prepended to M0
    M0_prime_inv: np.ndarray
    H_obs: np.ndarray         # (L-2,) observed conditioning values
    u_obs: float              # retained scalar statistic (first centred log ratio)
    cond_number: float


def _centered_log_ratios(stats_: SuffStats, rho0: float) -> np.ndarray:
    spec = stats_.spectrum
    lam = spec.lambdas
    r = spec.mults.astype(float)
    num = rho0 * (lam[:-1] - 1.0) + 1.0
    den = rho0 * (lam[-1] - 1.0) + 1.0
    return (np.log(stats_.S[:-1] / stats_.S[-1]) + np.log(r[-1] / r[:-1])
            - np.log(num / den))


def build_conditioner(rho0: float, stats_: SuffStats) -> LocalConditioner:
    """Orthogonal reduction of the ratio equations at a reference correlation.

    For L = 2 the conditioner is trivially empty: M0 has zero columns and the
    scalar statistic is the single centred log ratio.
    """
    if not 0.0 < rho0 < 1.0:
        raise DomainError("rho0 must lie strictly inside (0, 1)")
    spec = stats_.spectrum
    L = spec.L
    w = _centered_log_ratios(stats_, rho0)
    g = ratio_gradient(rho0, spec.lambdas)
    if L == 2:
        M0 = np.zeros((1, 0))
        M0p = np.ones((1, 1))
        return LocalConditioner(rho0=rho0, M0=M0, M0_prime=M0p,
                                M0_prime_inv=M0p.copy(), H_obs=np.zeros(0),
                                u_obs=float(w[0]), cond_number=1.0)
    M0 = null_space(g[None, :])
    if M0.shape != (L - 1, L - 2):
        raise DomainError("gradient direction is degenerate; cannot build the conditioner")
    e1 = np.zeros(L - 1)
    e1[0] = 1.0
    M0p = np.column_stack([e1, M0])
    M0p_inv = np.linalg.inv(M0p)
    return LocalConditioner(
        rho0=rho0, M0=M0, M0_prime=M0p, M0_prime_inv=M0p_inv,
        H_obs=w @ M0, u_obs=float(w[0]),
        cond_number=float(np.linalg.cond(M0p)))


@dataclass(frozen=True)
class _DensityParams:
    """Precomputed pieces for vectorized log-density evaluation."""

    a_vec: np.ndarray      # (L-1,) coefficient of u in the reconstruction
    b_row: np.ndarray      # (L-1,) offset from the conditioning values
    r_head: np.ndarray     # (L-1,)
    r_last: float
    r_total: float
    log_w: np.ndarray      # log(r_head / (2 r_last))


def _density_params(cond: LocalConditioner, spectrum: Spectrum) -> _DensityParams:
    r = spectrum.mults.astype(float)
    Minv = cond.M0_prime_inv
    a_vec = Minv[0, :].copy()
    b_row = cond.H_obs @ Minv[1:, :] if cond.H_obs.size else np.zeros(spectrum.L - 1)
    return _DensityParams(a_vec=a_vec, b_row=b_row, r_head=r[:-1], r_last=float(r[-1]),
                          r_total=float(r.sum()), log_w=np.log(r[:-1] / (2.0 * r[-1])))


def _log_density(u: np.ndarray, v: np.ndarray, par: _DensityParams) -> np.ndarray:
    """Vectorized conditional log-density, up to an additive constant."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    up = u[:, None] * par.a_vec[None, :] + par.b_row[None, :]      # (m, L-1)
    # log-sum-exp keeps exp(u') from overflowing for wild proposals
    tail = np.logaddexp.reduce(par.log_w[None, :] + up, axis=1)
    big = np.logaddexp(np.log(0.5 + v * v / (2.0 * par.r_last)), tail)
    return 0.5 * (up @ par.r_head) - 0.5 * (1.0 + par.r_total) * big


def log_density_uv(u: float, v: float, cond: LocalConditioner,
                   spectrum: Spectrum) -> float:
    """Conditional log-density of the auxiliary pair at one point."""
    if not (np.isfinite(u) and np.isfinite(v)):
        raise DomainError("auxiliary coordinates must be finite")
    par = _density_params(cond, spectrum)
    return float(_log_density(u, v, par)[0])


@dataclass(frozen=True)
class AuxDraws:
    """Equally weighted sampler output with chain diagnostics."""

    u: np.ndarray
    v: np.ndarray
    acceptance_rate: float
    ess_u: float
    ess_v: float
    tuning_ok: bool


def _ess(x: np.ndarray) -> float:
    """Effective sample size from the initial-positive-sequence estimator."""
    m = x.shape[0]
    xc = x - x.mean()
    var = float(xc @ xc) / m
    if var <= 0:
        return float(m)
    nfft = 1 << (2 * m - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:m].real / m
    rho = acov / acov[0]
    tau = 1.0
    for k in range(1, m - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        tau += 2.0 * pair
    return float(m / max(tau, 1.0))


def _chol2(c11, c12, c22, jitter=1e-10):
    """Cholesky of batched 2x2 covariances given as component arrays."""
    c11 = np.maximum(c11, jitter)
    l11 = np.sqrt(c11)
    l21 = c12 / l11
    l22 = np.sqrt(np.maximum(c22 - l21 ** 2, jitter))
    return l11, l21, l22


def _sample_batch(params: list[_DensityParams], m: int, burn: int,
                  seeds: list, adapt_block: int = 50):
    """Advance one random-walk chain per density in lockstep.

    Each chain consumes its own pre-generated randomness (keyed by its seed),
    so draws at a given grid point do not depend on which other grid points
    are being sampled.  Proposal scale adapts multiplicatively toward a 0.3
    acceptance rate during burn-in, and the proposal covariance is refreshed
    from the chain history halfway through and at the end of burn-in.
    """
    J = len(params)
    A = np.stack([p.a_vec for p in params])              # (J, L-1)
    Brow = np.stack([p.b_row for p in params])           # (J, L-1)
    r_head = params[0].r_head
    r_last = params[0].r_last
    r_total = params[0].r_total
    log_w = params[0].log_w

    def logf(u, v):
        up = u[:, None] * A + Brow                       # (J, L-1)
        tail = np.logaddexp.reduce(log_w[None, :] + up, axis=1)
        big = np.logaddexp(np.log(0.5 + v * v / (2.0 * r_last)), tail)
        return 0.5 * (up @ r_head) - 0.5 * (1.0 + r_total) * big

    total = burn + m
    eps = np.empty((total, J, 2))
    logu = np.empty((total, J))
    for j, seed in enumerate(seeds):
        g = np.random.default_rng(seed)
        eps[:, j, :] = g.standard_normal((total, 2))
        logu[:, j] = np.log(g.random(total))

    u = np.zeros(J)
    v = np.zeros(J)
    fc = logf(u, v)
    scale = np.full(J, 1.0)
    l11 = np.ones(J)
    l21 = np.zeros(J)
    l22 = np.ones(J)
    hist = np.empty((burn, J, 2))
    acc_block = np.zeros(J)

    for t in range(burn):
        du = scale * l11 * eps[t, :, 0]
        dv = scale * (l21 * eps[t, :, 0] + l22 * eps[t, :, 1])
        fp = logf(u + du, v + dv)
        acc = logu[t] <= fp - fc
        u = np.where(acc, u + du, u)
        v = np.where(acc, v + dv, v)
        fc = np.where(acc, fp, fc)
        hist[t, :, 0] = u
        hist[t, :, 1] = v
        acc_block += acc
        if (t + 1) % adapt_block == 0:
            scale *= np.exp(acc_block / adapt_block - _TARGET_ACCEPT)
            acc_block[:] = 0.0
            if t + 1 in (burn // 2, burn):
                h = hist[: t + 1]
                mu = h.mean(axis=0)
                d = h - mu
                c11 = (d[:, :, 0] ** 2).mean(axis=0)
                c12 = (d[:, :, 0] * d[:, :, 1]).mean(axis=0)
                c22 = (d[:, :, 1] ** 2).mean(axis=0)
                l11, l21, l22 = _chol2(c11, c12, c22)

    us = np.empty((J, m))
    vs = np.empty((J, m))
    accepted = np.zeros(J)
    for t in range(burn, total):
        du = scale * l11 * eps[t, :, 0]
        dv = scale * (l21 * eps[t, :, 0] + l22 * eps[t, :, 1])
        fp = logf(u + du, v + dv)
        acc = logu[t] <= fp - fc
        u = np.where(acc, u + du, u)
        v = np.where(acc, v + dv, v)
        fc = np.where(acc, fp, fc)
        k = t - burn
        us[:, k] = u
        vs[:, k] = v
        accepted += acc
    return us, vs, accepted / m


def sample_aux(cond: LocalConditioner, spectrum: Spectrum, m: int,
               rng: np.random.Generator, burn: int = DEFAULT_BURN) -> AuxDraws:
    """Draw m auxiliary pairs from the conditional density at cond.rho0.

    Deterministic given the generator state.  A TuningFailure warning (and a
    cleared tuning_ok flag) marks acceptance rates outside [0.1, 0.6].
    """
    if m < 1000:
        raise DomainError("need at least 1000 draws for a usable contour")
    par = _density_params(cond, spectrum)
    seed = rng.integers(0, 2 ** 63 - 1)
    us, vs, acc = _sample_batch([par], m, burn, [int(seed)])
    rate = float(acc[0])
    ok = _ACCEPT_RANGE[0] <= rate <= _ACCEPT_RANGE[1]
    if not ok:
        warnings.warn(f"acceptance rate {rate:.3f} outside {_ACCEPT_RANGE}",
                      TuningFailure, stacklevel=2)
    return AuxDraws(u=us[0], v=vs[0], acceptance_rate=rate,
                    ess_u=_ess(us[0]), ess_v=_ess(vs[0]), tuning_ok=ok)


def _v_constant(stats_: SuffStats, consts: PredictionConstants, rho0) -> np.ndarray:
    """Multiplier turning (theta - center) into the observed v statistic."""
    spec = stats_.spectrum
    rho0 = np.asarray(rho0, dtype=float)
    lam_last = spec.lambdas[-1]
    num = rho0 * (lam_last - 1.0) + 1.0
    den = rho0 * (consts.c1 - consts.c2) + consts.c2
    return np.sqrt(float(spec.mults[-1])) / np.sqrt(stats_.S[-1]) * np.sqrt(num / den)


def _center(stats_: SuffStats, x: np.ndarray | None) -> float:
    if x is None:
        if stats_.By.shape[0] != 1:
            raise DomainError("x is required when the model has more than one coefficient")
        return float(stats_.By[0])
    return float(np.asarray(x, dtype=float) @ stats_.By)


def joint_plausibility(theta_val: float, rho0: float, stats_: SuffStats,
                       consts: PredictionConstants, m: int = DEFAULT_DRAWS,
                       rng: np.random.Generator | None = None,
                       burn: int = DEFAULT_BURN,
                       x: np.ndarray | None = None,
                       draws: AuxDraws | None = None) -> float:
    """Monte Carlo plausibility of the pair (theta_val, rho0).

    Fraction of sampled auxiliary pairs whose density does not exceed the
    density at the observed pair.  Precomputed draws may be passed to reuse
    samples across candidate values; they must have been drawn at the same
    reference correlation (any one works when L = 2, where the conditional
    density does not depend on it).
    """
    cond = build_conditioner(rho0, stats_)
    spec = stats_.spectrum
    if draws is None:
        if rng is None:
            rng = np.random.default_rng()
        draws = sample_aux(cond, spec, m, rng, burn)
    par = _density_params(cond, spec)
    f_samples = _log_density(draws.u, draws.v, par)
    v_obs = (theta_val - _center(stats_, x)) * _v_constant(stats_, consts, rho0)
    f_obs = _log_density(cond.u_obs, float(v_obs), par)[0]
    return float(np.mean(f_samples <= f_obs))


class _MarginalEvaluator:
    """Per-grid-point sampled densities packaged for fast pointwise maxima."""

    def __init__(self, stats_: SuffStats, consts: PredictionConstants,
                 rho_grid: np.ndarray, m: int, burn: int, base_seed: int,
                 x: np.ndarray | None):
        spec = stats_.spectrum
        self.rho_grid = np.asarray(rho_grid, dtype=float)
        if self.rho_grid.size == 0:
            raise DomainError("reference correlation grid is empty")
        if (self.rho_grid <= 0).any() or (self.rho_grid >= 1).any():
            raise DomainError("reference correlations must lie inside (0, 1)")
        self.m = m
        self.center = _center(stats_, x)
        conds = [build_conditioner(r, stats_) for r in self.rho_grid]
        params = [_density_params(c, spec) for c in conds]
        # chain randomness is keyed by the rho value itself, so refining the
        # grid never perturbs the draws at points both grids share
        seeds = [np.random.SeedSequence(entropy=(base_seed, int(round(r * 1e12))))
                 for r in self.rho_grid]
        if spec.L == 2:
            # no conditioning: one sample set serves the whole grid
            us, vs, acc = _sample_batch([params[0]], m, burn,
                                        [np.random.SeedSequence(entropy=(base_seed, 2))])
            us = np.broadcast_to(us[0], (self.rho_grid.size, m))
            vs = np.broadcast_to(vs[0], (self.rho_grid.size, m))
            acc = np.broadcast_to(acc[0], (self.rho_grid.size,))
        else:
            us, vs, acc = _sample_batch(params, m, burn, seeds)
        self.acceptance = np.asarray(acc, dtype=float)
        J = self.rho_grid.size
        self._shared_sorted = None
        if spec.L == 2:
            # identical density and draws at every grid point: sort once
            f1 = np.sort(_log_density(us[0], vs[0], params[0]))
            self._shared_sorted = f1
            self.f_sorted = np.broadcast_to(f1, (J, m))
            self.ess_u = np.full(J, _ess(np.ascontiguousarray(us[0])))
            self.ess_v = np.full(J, _ess(np.ascontiguousarray(vs[0])))
        else:
            self.f_sorted = np.empty((J, m))
            self.ess_u = np.empty(J)
            self.ess_v = np.empty(J)
            for j, par in enumerate(params):
                self.f_sorted[j] = np.sort(_log_density(us[j], vs[j], par))
                self.ess_u[j] = _ess(np.ascontiguousarray(us[j]))
                self.ess_v[j] = _ess(np.ascontiguousarray(vs[j]))
        self.tuning_ok = ((self.acceptance >= _ACCEPT_RANGE[0])
                          & (self.acceptance <= _ACCEPT_RANGE[1]))
        # observed-side constants per grid point
        self.vc = _v_constant(stats_, consts, self.rho_grid)            # (J,)
        u_obs = np.array([c.u_obs for c in conds])
        A = np.stack([p.a_vec for p in params])
        Brow = np.stack([p.b_row for p in params])
        self.up_obs = u_obs[:, None] * A + Brow                         # (J, L-1)
        r = spec.mults.astype(float)
        self.r_head, self.r_last, self.r_total = r[:-1], float(r[-1]), float(r.sum())
        self.log_w = np.log(r[:-1] / (2.0 * r[-1]))
        self._lin = 0.5 * (self.up_obs @ self.r_head)                   # (J,)
        self._tail = np.logaddexp.reduce(self.log_w[None, :] + self.up_obs, axis=1)

    def _f_obs(self, theta_vals: np.ndarray) -> np.ndarray:
        """Observed-pair log densities, shape (J, T)."""
        v = (theta_vals[None, :] - self.center) * self.vc[:, None]
        big = np.logaddexp(np.log(0.5 + v * v / (2.0 * self.r_last)),
                           self._tail[:, None])
        return self._lin[:, None] - 0.5 * (1.0 + self.r_total) * big

    def profile(self, theta_vals) -> tuple[np.ndarray, np.ndarray]:
        """Marginal plausibility and maximizing rho index over the grid."""
        theta_vals = np.atleast_1d(np.asarray(theta_vals, dtype=float))
        fo = self._f_obs(theta_vals)
        if self._shared_sorted is not None:
            counts = np.searchsorted(self._shared_sorted, fo.ravel(),
                                     side="right").reshape(fo.shape).astype(float)
        else:
            counts = np.empty_like(fo)
            for j in range(self.rho_grid.size):
                counts[j] = np.searchsorted(self.f_sorted[j], fo[j], side="right")
        best = counts.argmax(axis=0)
        return counts.max(axis=0) / self.m, best

    def __call__(self, theta_val: float) -> float:
        return float(self.profile(theta_val)[0][0])

    def retargeted(self, stats_: SuffStats, consts: PredictionConstants,
                   x: np.ndarray | None = None) -> "_MarginalEvaluator":
        """Same samples and conditioning, new prediction constants.

        The auxiliary draws and the observed conditioning statistics do not
        involve the target, so switching between a group-mean and a
        new-observation target only rescales the observed v statistic.
        """
        import copy

        other = copy.copy(self)
        other.vc = _v_constant(stats_, consts, self.rho_grid)
        other.center = _center(stats_, x)
        return other


def retarget_contour(contour: intervals.Contour, stats_: SuffStats,
                     consts: PredictionConstants,
                     x: np.ndarray | None = None) -> intervals.Contour:
    """Rebuild a marginal contour for a different target, reusing its samples."""
    if not isinstance(contour.evaluate, _MarginalEvaluator):
        raise DomainError("can only retarget a marginal joint contour")
    ev = contour.evaluate.retargeted(stats_, consts, x)
    scale = math.sqrt((consts.c1 + consts.c2) * stats_.S.sum()
                      / stats_.spectrum.mults.sum())
    points = 201 if contour.grid_theta is None else int(np.size(contour.grid_theta))
    theta_grid = ev.center + scale * np.linspace(-10.0, 10.0, points)
    pi_grid, best = ev.profile(theta_grid)
    return intervals.Contour(evaluate=ev, center=ev.center, scale=scale,
                             grid_theta=theta_grid, grid_pi=pi_grid,
                             grid_argmax_rho=ev.rho_grid[best], meta=dict(contour.meta))


def marginal_contour(stats_: SuffStats, consts: PredictionConstants,
                     rho_grid: np.ndarray | None = None,
                     theta_grid: np.ndarray | None = None,
                     m: int = DEFAULT_DRAWS,
                     rng: np.random.Generator | None = None,
                     burn: int = DEFAULT_BURN,
                     x: np.ndarray | None = None) -> intervals.Contour:
    """Marginal contour: pointwise maximum of pair plausibilities over the grid.

    Auxiliary samples are drawn once per grid point and reused for every
    candidate target value.  The returned contour carries an exact evaluator,
    a tabulated grid (with the argmax correlation per point) and per-point
    sampler diagnostics in meta.
    """
    if rho_grid is None:
        rho_grid = default_rho_grid()
    if rng is None:
        rng = np.random.default_rng()
    base_seed = int(rng.integers(0, 2 ** 63 - 1))
    ev = _MarginalEvaluator(stats_, consts, rho_grid, m, burn, base_seed, x)

    scale = math.sqrt((consts.c1 + consts.c2) * stats_.S.sum()
                      / stats_.spectrum.mults.sum())
    if theta_grid is None:
        theta_grid = ev.center + scale * np.linspace(-10.0, 10.0, 201)
    theta_grid = np.asarray(theta_grid, dtype=float)
    pi_grid, best = ev.profile(theta_grid)
    if not ev.tuning_ok.all():
        bad = ev.rho_grid[~ev.tuning_ok]
        warnings.warn(f"acceptance rate outside {_ACCEPT_RANGE} at "
                      f"{bad.size} grid point(s)", TuningFailure, stacklevel=2)
    return intervals.Contour(
        evaluate=ev,
        center=ev.center,
        scale=scale,
        grid_theta=theta_grid,
        grid_pi=pi_grid,
        grid_argmax_rho=ev.rho_grid[best],
        meta={
            "rho_grid": ev.rho_grid,
            "acceptance": ev.acceptance,
            "ess_u": ev.ess_u,
            "ess_v": ev.ess_v,
            "tuning_ok": bool(ev.tuning_ok.all()),
            "draws_per_point": m,
        },
    )
