"""Valid prediction intervals for group-level effects in two-stage mixed models.

The package builds plausibility contours for the mean of an unobserved group
(or a single new response) in a Gaussian random-effects model, together with
the standard competing interval methods and a seeded Monte Carlo harness that
audits frequentist coverage.
"""

__version__ = "0.1.0"

from . import baselines, cli, errors, genim, intervals, jointim, model, simulate
from .baselines import (
    GEN_SATTERTHWAITE,
    ORACLE,
    SATTERTHWAITE,
    STUDENT_T,
    VarianceEstimate,
    bootstrap_se_eta,
    closed_form_interval,
    iid_normal_interval,
    nonparametric_bootstrap_interval,
    parametric_bootstrap_interval,
    reml_fit,
)
from .genim import DenominatorMode, gen_interval, gen_plausibility, t_tail_contour
from .intervals import Contour, IntervalReport, alpha_cut
from .jointim import build_conditioner, joint_plausibility, marginal_contour, sample_aux
from .model import (
    Dataset,
    PredictionConstants,
    PredictionTarget,
    Spectrum,
    SuffStats,
    TargetKind,
    eigen_structure,
    load_dataset,
    prediction_constants,
    projection_basis,
    spectral_summary,
    sufficient_stats,
)
from .simulate import DESIGNS, SimReport, StudyConfig, generate_dataset, run_coverage_study
