"""Robust multiple testing under factor dependence and heavy tails."""

__version__ = "0.1.0"

from .bootstrap import WeightScheme, bootstrap_pvalues, draw_weights, fit_weighted_huber
from .datagen import Calibration, FactorModelSpec, Panel, gen_panel, load_panel, save_panel
from .errors import (
    DegenerateDataError,
    DegenerateScaleError,
    InsufficientDataError,
    InvalidArgumentError,
    RankDeficientDesignError,
    RobustFDPError,
)
from .huber import (
    DesignMatrix,
    HuberConfig,
    HuberFit,
    HuberFitBatch,
    fit_adaptive_huber,
    fit_huber_columns,
    huber_location,
    huber_loss,
    huber_score,
    ols_fit,
    practical_tau,
    select_c,
)
from .testing import (
    RejectionOutcome,
    TestStatistics,
    bh_select,
    eigenvalue_ratio_k,
    evaluate,
    normal_pvalues,
    rejection_threshold,
    storey_pi0,
    test_statistics,
    two_sample_statistics,
)
from .variance import (
    adaptive_huber_variance,
    factor_cov,
    mom_sigma_jj,
    mom_variance,
    mom_variance_modified,
)
