"""Fixed rank kriging with a positive-definite covariance fit."""

from .binning import (
    BinScheme,
    BinSummary,
    TrendDesign,
    binned_moments,
    detrend_ols,
    make_bins,
    robustness_weights,
)
from .estimation import (
    CovParams,
    FitError,
    QRFactors,
    fit_frk_params,
    k_hat,
    min_eigenpair,
    pd_upper_bound,
    sigma2_ls,
)
from .grid import BasisSet, Grid, Resolution, build_multires_centroids, evaluate_bisquare, regular_grid
from .harness import CvReport, SimSpec, cross_validate, sigma2_scan, simulate_gp
from .predictor import FittedModel, apply_sigma_inv, fit_frk, fit_gls_beta, predict

__version__ = "0.1.0"
