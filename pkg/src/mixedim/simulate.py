"""Coverage studies for the random-intercept model at desk scale.

Four built-in group-size layouts (A: 5x6 balanced, B: 10x12 balanced,
C: 4,4,4,6,12, D: 4,4,7,11,13,16,16,16,16,17) crossed with variance pairs
are simulated replication by replication; every requested interval method is
scored against the realized new-group mean (and optionally the realized new
response), and coverage / mean-length / length-ratio tables are aggregated
with binomial standard errors.  Each replication owns a seeded substream, so
identical configurations reproduce the identical report row for row.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import baselines, genim, intervals, jointim
from .errors import (
    BracketError,
    DegenerateData,
    DomainError,
    EmptyCut,
    EstimationError,
    UsageError,
)
from .model import (
    Dataset,
    PredictionTarget,
    TargetKind,
    prediction_constants,
    spectral_summary,
    sufficient_stats,
)

__all__ = [
    "DESIGNS",
    "ALL_METHODS",
    "StudyConfig",
    "SimReport",
    "generate_dataset",
    "run_coverage_study",
]

DESIGNS: dict[str, tuple[int, ...]] = {
    "A": (6,) * 5,
    "B": (12,) * 10,
    "C": (4, 4, 4, 6, 12),
    "D": (4, 4, 7, 11, 13, 16, 16, 16, 16, 17),
}

JOINT_IM = "joint-im"
ADJ_JOINT_IM = "adj-joint-im"
GEN_IM = "gen-im"
ADJ_GEN_IM = "adj-gen-im"
PARAM_BOOT = "param-boot"
NONPAR_BOOT = "nonpar-boot"

ALL_METHODS = (
    baselines.ORACLE,
    baselines.STUDENT_T,
    baselines.SATTERTHWAITE,
    baselines.GEN_SATTERTHWAITE,
    JOINT_IM,
    ADJ_JOINT_IM,
    GEN_IM,
    ADJ_GEN_IM,
    PARAM_BOOT,
    NONPAR_BOOT,
)

# coverage below this is flagged for nominal-95% rows (the usual reporting rule)
FLAG_95 = 0.935


@dataclass(frozen=True)
class StudyConfig:
    """One simulation cell plus every tuning knob the methods need."""

    design: str | tuple[int, ...] = "A"
    sigma_alpha2: float = 0.5
    sigma_eps2: float = 0.5
    mu: float = 0.0
    targets: tuple[str, ...] = (TargetKind.GROUP_MEAN.value,)
    methods: tuple[str, ...] = (baselines.ORACLE, baselines.STUDENT_T)
    replications: int = 500
    alphas: tuple[float, ...] = (0.05,)
    seed: int = 0
    rho_grid_size: int = 100
    rho_bounds: tuple[float, float] = (0.001, 0.999)
    mcmc_draws: int = 5000
    mcmc_burn: int = 1000
    boot_B: int = 500
    nonpar_B: int = 500
    eta_se_B: int = 100
    threads: int = 1

    def __post_init__(self):
        design = self.design
        if isinstance(design, str):
            if design not in DESIGNS:
                raise UsageError(f"unknown design {design!r}; use one of "
                                 f"{sorted(DESIGNS)} or explicit group sizes")
        else:
            object.__setattr__(self, "design", tuple(int(s) for s in design))
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        for m in self.methods:
            if m not in ALL_METHODS:
                raise UsageError(f"unknown method {m!r}")
        for t in self.targets:
            TargetKind(t)
        for a in self.alphas:
            if not 0.0 < a < 1.0:
                raise DomainError("alpha levels must lie in (0, 1)")
        if self.replications < 1:
            raise UsageError("need at least one replication")

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return DESIGNS[self.design] if isinstance(self.design, str) else self.design

    def to_dict(self) -> dict:
        d = asdict(self)
        d["design"] = self.design if isinstance(self.design, str) else list(self.design)
        for key in ("targets", "methods", "alphas", "rho_bounds"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d)
        if isinstance(d.get("design"), list):
            d["design"] = tuple(d["design"])
        for key in ("targets", "methods", "alphas", "rho_bounds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "StudyConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _make_dataset(y: np.ndarray, sizes: tuple[int, ...]) -> Dataset:
    return Dataset(
        y=y,
        X=np.ones((y.shape[0], 1)),
        Z_blocks=tuple(np.ones((m, 1)) for m in sizes),
        A=np.array([[1.0]]),
        group_ids=tuple(range(len(sizes))),
        group_sizes=np.asarray(sizes, dtype=int),
    )


def generate_dataset(config: StudyConfig, rep_index: int):
    """Simulated dataset plus the realized prediction targets.

    Deterministic in (config.seed, rep_index); distinct replications use
    disjoint substreams.  Returns (dataset, theta, y_star) where theta is the
    realized new-group mean and y_star a realized new response.
    """
    sizes = config.group_sizes
    n = sum(sizes)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=(int(config.seed), int(rep_index))))
    sa = math.sqrt(config.sigma_alpha2)
    se = math.sqrt(config.sigma_eps2)
    alpha_i = sa * rng.standard_normal(len(sizes))
    eps = se * rng.standard_normal(n)
    y = config.mu + np.repeat(alpha_i, sizes) + eps
    theta = config.mu + sa * rng.standard_normal()
    y_star = theta + se * rng.standard_normal()
    return _make_dataset(y, sizes), float(theta), float(y_star)


class _Context:
    """Per-design precomputation shared by every replication."""

    def __init__(self, config: StudyConfig):
        sizes = config.group_sizes
        template = _make_dataset(np.arange(sum(sizes), dtype=float), sizes)
        self.sizes = sizes
        self.spectrum = spectral_summary(template)
        self.targets = {}
        for t in config.targets:
            kind = TargetKind(t)
            target = PredictionTarget.intercept_only(kind)
            self.targets[t] = (target, prediction_constants(template, target))
        self.rho_grid = np.linspace(config.rho_bounds[0], config.rho_bounds[1],
                                    config.rho_grid_size)


def _method_rng(config: StudyConfig, rep_index: int, lane: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=(int(config.seed), int(rep_index), lane)))


_FAILURE_TYPES = (EstimationError, EmptyCut, BracketError, DegenerateData)


def _run_one(ctx: _Context, config: StudyConfig, rep_index: int) -> dict:
    """Every requested (method, target, alpha) interval for one replication."""
    dataset, theta, y_star = generate_dataset(config, rep_index)
    stats_ = sufficient_stats(dataset, ctx.spectrum)
    realized = {TargetKind.GROUP_MEAN.value: theta,
                TargetKind.NEW_OBSERVATION.value: y_star}
    methods = set(config.methods) | {baselines.ORACLE}
    needs_reml = methods & {baselines.STUDENT_T, baselines.SATTERTHWAITE,
                            baselines.GEN_SATTERTHWAITE, ADJ_GEN_IM, PARAM_BOOT}
    reml = baselines.reml_fit(stats_) if needs_reml else None
    delta = None
    if ADJ_GEN_IM in methods:
        delta = baselines.bootstrap_se_eta(dataset, stats_, B=config.eta_se_B,
                                           rng=_method_rng(config, rep_index, 4),
                                           reml=reml, resampling="stratified")
    joint_base = None
    if methods & {JOINT_IM, ADJ_JOINT_IM}:
        first = config.targets[0]
        joint_base = (first, jointim.marginal_contour(
            stats_, ctx.targets[first][1], rho_grid=ctx.rho_grid,
            m=config.mcmc_draws, rng=_method_rng(config, rep_index, 1),
            burn=config.mcmc_burn))

    out: dict = {}

    def record(method, tname, alpha, report):
        value = realized[tname]
        out[(method, tname, alpha)] = (
            bool(report.lower <= value <= report.upper), report.length)

    def record_fail(method, tname):
        for alpha in config.alphas:
            out[(method, tname, alpha)] = None

    for tname in config.targets:
        target, consts = ctx.targets[tname]
        truth = (config.sigma_alpha2, config.sigma_eps2)

        for method in (baselines.ORACLE, baselines.STUDENT_T,
                       baselines.SATTERTHWAITE, baselines.GEN_SATTERTHWAITE):
            if method not in methods:
                continue
            try:
                for alpha in config.alphas:
                    record(method, tname, alpha, baselines.closed_form_interval(
                        method, stats_, consts, dataset, target,
                        truth=truth if method == baselines.ORACLE else None,
                        alpha=alpha, reml=reml))
            except _FAILURE_TYPES:
                record_fail(method, tname)

        if GEN_IM in methods:
            try:
                for alpha in config.alphas:
                    record(GEN_IM, tname, alpha, genim.gen_interval(
                        stats_, consts, genim.DenominatorMode.sup(), alpha,
                        kind=tname))
            except _FAILURE_TYPES:
                record_fail(GEN_IM, tname)

        if ADJ_GEN_IM in methods:
            try:
                mode = genim.DenominatorMode.adjusted(reml.eta_hat, delta)
                for alpha in config.alphas:
                    record(ADJ_GEN_IM, tname, alpha,
                           genim.gen_interval(stats_, consts, mode, alpha, kind=tname))
            except _FAILURE_TYPES:
                record_fail(ADJ_GEN_IM, tname)

        if methods & {JOINT_IM, ADJ_JOINT_IM}:
            try:
                first, base = joint_base
                contour = base if tname == first else jointim.retarget_contour(
                    base, stats_, consts)
                for method, mode in ((JOINT_IM, intervals.NOMINAL),
                                     (ADJ_JOINT_IM, intervals.JOINT_ADJUSTED)):
                    if method not in methods:
                        continue
                    for alpha in config.alphas:
                        try:
                            record(method, tname, alpha, intervals.alpha_cut(
                                contour, alpha, level_mode=mode,
                                method=method, kind=tname))
                        except EmptyCut:
                            # an empty super-level set is a real answer: it
                            # cannot contain the target, and it has length 0
                            out[(method, tname, alpha)] = (False, 0.0)
                        except _FAILURE_TYPES:
                            out[(method, tname, alpha)] = None
            except _FAILURE_TYPES:
                for method in (JOINT_IM, ADJ_JOINT_IM):
                    if method in methods:
                        record_fail(method, tname)

        if PARAM_BOOT in methods:
            try:
                theta_b, _ = baselines.parametric_bootstrap_draws(
                    dataset, stats_, consts, config.boot_B,
                    _method_rng(config, rep_index, 2), target, reml)
                for alpha in config.alphas:
                    lo, hi = np.quantile(theta_b, [alpha / 2, 1 - alpha / 2])
                    report = intervals.IntervalReport(
                        lower=float(lo), upper=float(hi), level=1 - alpha,
                        method=PARAM_BOOT, kind=tname)
                    record(PARAM_BOOT, tname, alpha, report)
            except _FAILURE_TYPES:
                record_fail(PARAM_BOOT, tname)

        if NONPAR_BOOT in methods:
            try:
                pool = baselines.stratified_bootstrap_pool(
                    dataset, config.nonpar_B, _method_rng(config, rep_index, 3),
                    TargetKind(tname))
                for alpha in config.alphas:
                    lo, hi = np.quantile(pool, [alpha / 2, 1 - alpha / 2])
                    report = intervals.IntervalReport(
                        lower=float(lo), upper=float(hi), level=1 - alpha,
                        method=NONPAR_BOOT, kind=tname)
                    record(NONPAR_BOOT, tname, alpha, report)
            except _FAILURE_TYPES:
                record_fail(NONPAR_BOOT, tname)

    return out


def _run_chunk(config_dict: dict, start: int, stop: int) -> list[dict]:
    config = StudyConfig.from_dict(config_dict)
    ctx = _Context(config)
    return [_run_one(ctx, config, k) for k in range(start, stop)]


@dataclass
class SimReport:
    """Aggregated coverage table plus the configuration that produced it."""

    rows: list[dict]
    config: dict
    replications: int
    runtime_s: float = 0.0

    def row(self, method: str, target: str, level: float) -> dict:
        for r in self.rows:
            if (r["method"] == method and r["target"] == target
                    and abs(r["level"] - level) < 1e-12):
                return r
        raise KeyError((method, target, level))

    def to_dict(self) -> dict:
        return {"config": self.config, "replications": self.replications,
                "runtime_s": self.runtime_s, "rows": self.rows}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def to_csv(self, path) -> None:
        cols = ["method", "target", "level", "coverage", "length_ratio",
                "coverage_se", "mean_length", "n_used", "n_failures", "flagged"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for r in self.rows:
                writer.writerow({c: r[c] for c in cols})


def run_coverage_study(config: StudyConfig) -> SimReport:
    """Run every replication and aggregate coverage and length tables.

    The oracle method is always included (length ratios are relative to it).
    Per-replication method failures are counted and excluded from that
    method's aggregates.  With config.threads > 1 replications are split
    across processes; aggregation order is fixed by replication index either
    way, so reports are reproducible bit for bit.
    """
    t0 = time.perf_counter()
    R = config.replications
    if config.threads > 1:
        n_chunks = min(config.threads, R)
        bounds = np.linspace(0, R, n_chunks + 1).astype(int)
        per_rep: list[dict] = []
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            futures = [pool.submit(_run_chunk, config.to_dict(), int(a), int(b))
                       for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            for fut in futures:
                per_rep.extend(fut.result())
    else:
        per_rep = _run_chunk(config.to_dict(), 0, R)

    methods = list(dict.fromkeys([baselines.ORACLE, *config.methods]))
    rows = []
    oracle_mean_len: dict = {}
    for tname in config.targets:
        for alpha in config.alphas:
            key = (baselines.ORACLE, tname, alpha)
            lens = [rec[key][1] for rec in per_rep if rec.get(key) is not None]
            oracle_mean_len[(tname, alpha)] = (math.fsum(lens) / len(lens)
                                               if lens else math.nan)
    for method in methods:
        for tname in config.targets:
            for alpha in config.alphas:
                key = (method, tname, alpha)
                recs = [rec.get(key) for rec in per_rep]
                used = [r for r in recs if r is not None]
                n_used = len(used)
                n_fail = len(recs) - n_used
                if n_used == 0:
                    rows.append({"method": method, "target": tname,
                                 "level": 1 - alpha, "coverage": math.nan,
                                 "coverage_se": math.nan, "mean_length": math.nan,
                                 "length_ratio": math.nan, "n_used": 0,
                                 "n_failures": n_fail, "flagged": False})
                    continue
                cov = math.fsum(1.0 for c, _ in used if c) / n_used
                se = math.sqrt(max(cov * (1 - cov), 1e-12) / n_used)
                mean_len = math.fsum(length for _, length in used) / n_used
                base = oracle_mean_len[(tname, alpha)]
                nominal = 1 - alpha
                flagged = (cov < FLAG_95 if abs(nominal - 0.95) < 1e-9
                           else cov < nominal - 3 * se)
                rows.append({
                    "method": method, "target": tname, "level": nominal,
                    "coverage": cov, "coverage_se": se, "mean_length": mean_len,
                    "length_ratio": mean_len / base if base else math.nan,
                    "n_used": n_used, "n_failures": n_fail,
                    "flagged": bool(flagged),
                })
    return SimReport(rows=rows, config=config.to_dict(), replications=R,
                     runtime_s=time.perf_counter() - t0)
