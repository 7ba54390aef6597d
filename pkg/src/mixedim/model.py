"""Two-stage mixed model data structures and their spectral reduction.

The observed side of the model is a grouped Gaussian response: each group
carries a random effect with known scaling matrix A and unknown variance
sigma_alpha^2, on top of iid residual noise with variance sigma_eps^2.
Everything downstream (variance estimation, plausibility contours, every
interval method) consumes the residual-space summary built here:

  * a projection basis K for the orthogonal complement of the fixed-effects
    design, with K K' = I - X (X'X)^{-1} X' and K'K = I;
  * the clustered eigenstructure of H = K' G K, where G is the block-diagonal
    random-effect covariance scaling;
  * per-cluster sums of squares S_l = ||P_l' K' y||^2, which are independent
    scaled chi-squares, plus the coefficient estimate By = (X'X)^{-1} X' y;
  * the prediction-variance constants (c1, c2) with
    Var(target - x'BY) = c1 * sigma_alpha^2 + c2 * sigma_eps^2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag, eigh

from .errors import (
    DegenerateData,
    DegenerateSpectrum,
    ParseError,
    RankDeficientDesign,
    ValidationError,
)

__all__ = [
    "Dataset",
    "Spectrum",
    "SuffStats",
    "TargetKind",
    "PredictionTarget",
    "PredictionConstants",
    "DEFAULT_CLUSTER_TOL",
    "projection_basis",
    "eigen_structure",
    "spectral_summary",
    "sufficient_stats",
    "prediction_constants",
    "load_dataset",
    "dataset_summary",
]

DEFAULT_CLUSTER_TOL = 1e-8
_SPD_RTOL = 1e-10
_ZERO_S_RTOL = 1e-12


def _frozen_array(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """Grouped responses with fixed- and random-effect designs.

    Rows are stored group-contiguously, groups in first-appearance order.
    All arrays are defensive copies marked read-only, so instances are safe
    to share across threads.
    """

    y: np.ndarray                      # (n,) responses
    X: np.ndarray                      # (n, p) fixed-effects design, full column rank
    Z_blocks: tuple[np.ndarray, ...]   # per-group (n_i, a) random-effect designs
    A: np.ndarray                      # (a, a) known SPD scaling of the random effect
    group_ids: tuple                   # length-N labels, first-appearance order
    group_sizes: np.ndarray            # (N,) int

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen_array(self.y))
        object.__setattr__(self, "X", _frozen_array(self.X))
        object.__setattr__(self, "A", _frozen_array(self.A))
        object.__setattr__(self, "Z_blocks", tuple(_frozen_array(z) for z in self.Z_blocks))
        object.__setattr__(self, "group_ids", tuple(self.group_ids))
        object.__setattr__(self, "group_sizes", _frozen_array(self.group_sizes, dtype=int))

        if self.y.ndim != 1:
            raise ValidationError("y must be one-dimensional")
        if self.X.ndim != 2 or self.X.shape[0] != self.n:
            raise ValidationError("X must be (n, p) with rows matching y")
        if len(self.group_ids) != self.N or len(self.Z_blocks) != self.N:
            raise ValidationError("group_ids and Z_blocks must have one entry per group")
        if (self.group_sizes < 1).any():
            raise ValidationError("every group must be nonempty")
        if int(self.group_sizes.sum()) != self.n:
            raise ValidationError("group sizes must sum to the number of rows")
        a = self.a
        for i, z in enumerate(self.Z_blocks):
            if z.shape != (int(self.group_sizes[i]), a):
                raise ValidationError(f"Z block {i} has shape {z.shape}, expected "
                                      f"({int(self.group_sizes[i])}, {a})")
        if self.A.shape != (a, a):
            raise ValidationError("A must be (a, a)")
        if np.abs(self.A - self.A.T).max() > _SPD_RTOL * max(1.0, np.abs(self.A).max()):
            raise ValidationError("A must be symmetric")
        eigs = np.linalg.eigvalsh(self.A)
        if eigs.min() <= _SPD_RTOL * max(1.0, eigs.max()):
            raise ValidationError("A must be positive definite")
        if self.p >= self.n:
            raise ValidationError("need p < n: no residual space")
        s = np.linalg.svd(self.X, compute_uv=False)
        if s[-1] <= 1e-10 * s[0]:
            raise RankDeficientDesign("X does not have full column rank")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def N(self) -> int:
        return self.group_sizes.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def a(self) -> int:
        return self.Z_blocks[0].shape[1]

    @property
    def is_random_intercept(self) -> bool:
        return (self.a == 1 and self.A.shape == (1, 1) and abs(self.A[0, 0] - 1.0) < 1e-12
                and all(np.all(z == 1.0) for z in self.Z_blocks))

    @cached_property
    def group_slices(self) -> tuple[slice, ...]:
        ends = np.cumsum(self.group_sizes)
        starts = np.concatenate([[0], ends[:-1]])
        return tuple(slice(int(s), int(e)) for s, e in zip(starts, ends))

    @cached_property
    def G(self) -> np.ndarray:
        """Block-diagonal random-effect covariance scaling, blocks Z_i A Z_i'."""
        return block_diag(*[z @ self.A @ z.T for z in self.Z_blocks])

    @classmethod
    def random_intercept(cls, y, group_labels) -> "Dataset":
        """Intercept-only dataset from raw responses and group labels.

        Rows are reordered group-major, groups in first-appearance order.
        """
        y = np.asarray(y, dtype=float)
        labels = list(group_labels)
        if len(labels) != y.shape[0]:
            raise ValidationError("group labels must match y in length")
        order: dict = {}
        for lab in labels:
            order.setdefault(lab, len(order))
        idx = np.argsort([order[lab] for lab in labels], kind="stable")
        y = y[idx]
        ids = tuple(order)
        sizes = np.array([labels.count(lab) for lab in ids], dtype=int)
        n = y.shape[0]
        return cls(
            y=y,
            X=np.ones((n, 1)),
            Z_blocks=tuple(np.ones((m, 1)) for m in sizes),
            A=np.array([[1.0]]),
            group_ids=ids,
            group_sizes=sizes,
        )


@dataclass(frozen=True)
class Spectrum:
    """Clustered eigenstructure of H = K' G K.

    lambdas are the distinct eigenvalues in decreasing order, mults their
    multiplicities (summing to n - p), and P_blocks the matching orthonormal
    eigenvector blocks in residual-space coordinates.  K is retained so the
    sums of squares can be formed from raw responses.
    """

    lambdas: np.ndarray                # (L,) decreasing
    mults: np.ndarray                  # (L,) int, sums to n - p
    P_blocks: tuple[np.ndarray, ...]   # per cluster (n-p, r_l)
    K: np.ndarray                      # (n, n-p)

    def __post_init__(self):
        object.__setattr__(self, "lambdas", _frozen_array(self.lambdas))
        object.__setattr__(self, "mults", _frozen_array(self.mults, dtype=int))
        object.__setattr__(self, "P_blocks", tuple(_frozen_array(b) for b in self.P_blocks))
        object.__setattr__(self, "K", _frozen_array(self.K))

    @property
    def L(self) -> int:
        return self.lambdas.shape[0]

    @property
    def residual_dim(self) -> int:
        return int(self.mults.sum())

    @cached_property
    def Q_blocks(self) -> tuple[np.ndarray, ...]:
        """Data-space projection blocks K P_l, so S_l = ||Q_l' y||^2."""
        return tuple(_frozen_array(self.K @ b) for b in self.P_blocks)


@dataclass(frozen=True)
class SuffStats:
    """Minimal sufficient summary: coefficient estimate plus spectral sums of squares."""

    By: np.ndarray        # (p,) coefficient estimate (X'X)^{-1} X' y
    S: np.ndarray         # (L,) positive sums of squares
    spectrum: Spectrum
    BBt: np.ndarray       # (p, p) B B' = (X'X)^{-1}
    BGBt: np.ndarray      # (p, p) B G B'

    def __post_init__(self):
        object.__setattr__(self, "By", _frozen_array(self.By))
        object.__setattr__(self, "S", _frozen_array(self.S))
        object.__setattr__(self, "BBt", _frozen_array(self.BBt))
        object.__setattr__(self, "BGBt", _frozen_array(self.BGBt))


class TargetKind(Enum):
    GROUP_MEAN = "group-mean"
    NEW_OBSERVATION = "new-obs"


@dataclass(frozen=True)
class PredictionTarget:
    """What to predict: x'beta + z'(new random effect), optionally plus new noise."""

    x: np.ndarray
    z: np.ndarray
    kind: TargetKind = TargetKind.GROUP_MEAN

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen_array(self.x))
        object.__setattr__(self, "z", _frozen_array(self.z))
        if self.x.ndim != 1 or self.z.ndim != 1:
            raise ValidationError("target covariate vectors must be one-dimensional")

    def validate_against(self, dataset: Dataset) -> None:
        if self.x.shape[0] != dataset.p:
            raise ValidationError(f"x has length {self.x.shape[0]}, expected p={dataset.p}")
        if self.z.shape[0] != dataset.a:
            raise ValidationError(f"z has length {self.z.shape[0]}, expected a={dataset.a}")

    @classmethod
    def intercept_only(cls, kind: TargetKind = TargetKind.GROUP_MEAN) -> "PredictionTarget":
        return cls(x=np.array([1.0]), z=np.array([1.0]), kind=kind)


@dataclass(frozen=True)
class PredictionConstants:
    """Coefficients of (sigma_alpha^2, sigma_eps^2) in Var(target - x'BY)."""

    c1: float
    c2: float

    def __post_init__(self):
        if not (self.c1 >= 0.0 and self.c2 > 0.0):
            raise ValidationError("need c1 >= 0 and c2 > 0")


def projection_basis(X: np.ndarray) -> np.ndarray:
    """Orthonormal basis K of the orthogonal complement of col(X).

    Built from the eigendecomposition of the projector I - X (X'X)^{-1} X',
    keeping eigenvectors with eigenvalue near one.  Satisfies K'K = I and
    K'X = 0 to 1e-10.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    s = np.linalg.svd(X, compute_uv=False)
    if p == 0 or s[-1] <= 1e-10 * s[0]:
        raise RankDeficientDesign("X does not have full column rank")
    if n - p == 0:
        raise ValidationError("n - p = 0: no residual space")
    proj = np.eye(n) - X @ np.linalg.solve(X.T @ X, X.T)
    w, V = eigh(proj)
    K = V[:, w > 0.5]
    if K.shape[1] != n - p:
        raise ValidationError("projector eigenvalues did not split into 0/1 as expected")
    return K


def eigen_structure(dataset: Dataset, K: np.ndarray,
                    tol_cluster: float = DEFAULT_CLUSTER_TOL) -> Spectrum:
    """Clustered eigendecomposition of H = K' G K.

    Eigenvalues within a relative gap of tol_cluster * max(1, lambda_max) are
    merged into one cluster; cluster values near zero are snapped to zero.
    Raises DegenerateSpectrum when fewer than two clusters remain.
    """
    K = np.asarray(K, dtype=float)
    H = K.T @ dataset.G @ K
    evals, evecs = eigh(H)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]

    gap = tol_cluster * max(1.0, float(evals[0]))
    split_after = np.where((evals[:-1] - evals[1:]) > gap)[0]
    blocks = np.split(np.arange(evals.shape[0]), split_after + 1)

    lambdas = []
    mults = []
    P_blocks = []
    for idx in blocks:
        val = float(evals[idx].mean())
        if abs(val) <= gap:
            val = 0.0
        lambdas.append(val)
        mults.append(len(idx))
        P_blocks.append(evecs[:, idx])

    if len(lambdas) < 2:
        raise DegenerateSpectrum(
            "only one eigenvalue cluster: the two variance components are not separable")
    return Spectrum(lambdas=np.array(lambdas), mults=np.array(mults, dtype=int),
                    P_blocks=tuple(P_blocks), K=K)


def spectral_summary(dataset: Dataset,
                     tol_cluster: float = DEFAULT_CLUSTER_TOL) -> Spectrum:
    """Convenience wrapper: projection basis plus clustered eigenstructure."""
    return eigen_structure(dataset, projection_basis(dataset.X), tol_cluster)


def sufficient_stats(dataset: Dataset, spectrum: Spectrum) -> SuffStats:
    """Coefficient estimate and per-cluster sums of squares.

    S_l = ||P_l' K' y||^2; all must be strictly positive, and their total
    equals the residual sum of squares.  Raises DegenerateData when any
    cluster sum is numerically zero (every downstream density takes log S_l).
    """
    X, y = dataset.X, dataset.y
    XtX = X.T @ X
    By = np.linalg.solve(XtX, X.T @ y)
    Ky = spectrum.K.T @ y
    S = np.array([float(np.sum((blk.T @ Ky) ** 2)) for blk in spectrum.P_blocks])
    total = S.sum()
    if total <= _ZERO_S_RTOL * max(1.0, float(y @ y)):
        raise DegenerateData("the response lies in the column space of X")
    if (S <= _ZERO_S_RTOL * total).any():
        raise DegenerateData("a sum of squares is numerically zero")
    BBt = np.linalg.solve(XtX, np.eye(dataset.p))
    B = np.linalg.solve(XtX, X.T)
    # B G B' accumulated block-wise: G never needs dense assembly here
    BGBt = np.zeros((dataset.p, dataset.p))
    for sl, z in zip(dataset.group_slices, dataset.Z_blocks):
        BZ = B[:, sl] @ z
        BGBt += BZ @ dataset.A @ BZ.T
    return SuffStats(By=By, S=S, spectrum=spectrum, BBt=BBt, BGBt=BGBt)


def prediction_constants(dataset: Dataset, target: PredictionTarget) -> PredictionConstants:
    """Variance coefficients for the chosen target.

    c1 = x' BGB' x + z'Az multiplies sigma_alpha^2; c2 = x' BB' x multiplies
    sigma_eps^2, plus one more residual unit when predicting a new response.
    """
    target.validate_against(dataset)
    X = dataset.X
    XtX = X.T @ X
    B = np.linalg.solve(XtX, X.T)
    Bx = np.linalg.solve(XtX, target.x)
    c2 = float(target.x @ Bx)
    c1 = float(target.z @ dataset.A @ target.z)
    for sl, z in zip(dataset.group_slices, dataset.Z_blocks):
        v = z.T @ (B[:, sl].T @ target.x)
        c1 += float(v @ dataset.A @ v)
    if target.kind is TargetKind.NEW_OBSERVATION:
        c2 += 1.0
    return PredictionConstants(c1=c1, c2=c2)


def dataset_summary(dataset: Dataset, spectrum: Spectrum) -> dict:
    """JSON-ready structural summary."""
    return {
        "n": dataset.n,
        "N": dataset.N,
        "p": dataset.p,
        "L": spectrum.L,
        "lambdas": [float(v) for v in spectrum.lambdas],
        "mults": [int(m) for m in spectrum.mults],
    }


DEFAULT_SCHEMA = {"response": "response", "group": "group", "covariates": []}


def load_dataset(path, schema: dict | None = None) -> Dataset:
    """Read a grouped CSV into a Dataset.

    The schema maps roles to column names: required keys "response" and
    "group", optional "covariates" (a list of numeric columns appended to an
    always-present intercept).  Rows are reordered group-major, groups in
    first-appearance order.  The random effect is a per-group intercept.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [schema["response"], schema["group"], *schema["covariates"]]
        missing = [c for c in needed if c not in header]
        if missing:
            raise ParseError(f"missing column(s) {missing!r} in {path.name}; "
                             f"found {header!r}")
        y, labels, covs = [], [], []
        for rownum, row in enumerate(reader, start=2):
            try:
                y.append(float(row[schema["response"]]))
                covs.append([float(row[c]) for c in schema["covariates"]])
            except (TypeError, ValueError) as exc:
                raise ParseError(f"non-numeric cell at line {rownum} of {path.name}") from exc
            labels.append(row[schema["group"]])
    if not y:
        raise ParseError(f"{path.name} has no data rows")

    order: dict = {}
    for lab in labels:
        order.setdefault(lab, len(order))
    idx = np.argsort([order[lab] for lab in labels], kind="stable")
    y = np.asarray(y, dtype=float)[idx]
    covs = np.asarray(covs, dtype=float).reshape(len(labels), -1)[idx]
    ids = tuple(order)
    counts = {lab: labels.count(lab) for lab in ids}
    sizes = np.array([counts[lab] for lab in ids], dtype=int)
    X = np.column_stack([np.ones(y.shape[0]), covs]) if covs.size else np.ones((y.shape[0], 1))
    return Dataset(
        y=y,
        X=X,
        Z_blocks=tuple(np.ones((m, 1)) for m in sizes),
        A=np.array([[1.0]]),
        group_ids=ids,
        group_sizes=sizes,
    )
