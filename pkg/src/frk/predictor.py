"""Low-rank kriging prediction without forming any n x n matrix."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, cholesky

from .binning import TrendDesign, _check_full_rank, binned_moments, detrend_ols, make_bins
from .estimation import DEFAULT_MAX_ITER, PD_TOL, CovParams, fit_frk_params
from .grid import BasisSet, Grid, build_multires_centroids, evaluate_bisquare

log = logging.getLogger(__name__)

MAX_K_CONDITION = 1e12


@dataclass(frozen=True)
class FittedModel:
    """Everything needed to predict, with the r x r and p x p caches.

    Arrays indexed by location (``Z``, ``X``, ``Y``, ``V_diag``) cover the
    observed training locations only.
    """

    beta_gls: np.ndarray
    params: CovParams
    basis: BasisSet = field(repr=False)
    design: TrendDesign = field(repr=False)
    V_diag: np.ndarray = field(repr=False)
    observed_Y: np.ndarray = field(repr=False)
    cached_core: np.ndarray = field(repr=False)
    # Z' Sigma^-1 (Y - X beta), Z' Sigma^-1 Z, X' Sigma^-1 Z, (X' Sigma^-1 X)^-1
    w: np.ndarray = field(repr=False)
    ZtSiZ: np.ndarray = field(repr=False)
    XtSiZ: np.ndarray = field(repr=False)
    XtSiX_inv: np.ndarray = field(repr=False)
    beta_ols: np.ndarray | None = field(default=None, repr=False)

    @property
    def Z(self) -> sp.csr_matrix:
        return self.basis.evaluation

    @property
    def X(self) -> np.ndarray:
        return self.design.X

    @property
    def sigma2(self) -> float:
        return self.params.sigma2

    @property
    def K(self) -> np.ndarray:
        return self.params.K

    @classmethod
    def build(cls, params: CovParams, basis: BasisSet, design: TrendDesign, Y, V_diag=None, beta_ols=None):
        """Factor the caches for ``params`` on training data ``(Z, X, Y)``."""
        Y = np.asarray(Y, float)
        n = len(Y)
        v = np.ones(n) if V_diag is None else np.asarray(V_diag, float)
        if basis.evaluation.shape[0] != n or design.X.shape[0] != n or len(v) != n:
            raise ValueError("basis rows, design rows, Y and V must have equal length")
        core = _core(params, basis.evaluation, v)
        partial = cls(
            np.empty(0), params, basis, design, v, Y, core,
            np.empty(0), np.empty((0, 0)), np.empty((0, 0)), np.empty((0, 0)),
        )
        Z = basis.evaluation
        SiX = apply_sigma_inv(partial, design.X)
        XtSiX = _sym(design.X.T @ SiX)
        _check_full_rank(XtSiX, "X' Sigma^-1 X", tall=False)
        XtSiX_inv = _sym(np.linalg.inv(XtSiX))
        beta = np.linalg.solve(XtSiX, SiX.T @ Y)
        w = Z.T @ apply_sigma_inv(partial, Y - design.X @ beta)
        G = _gram(Z, 1.0 / (params.sigma2 * v))
        ZtSiZ = _sym(G - G @ core @ G)
        XtSiZ = np.asarray((Z.T @ SiX).T)
        return cls(beta, params, basis, design, v, Y, core, w, ZtSiZ, XtSiZ, XtSiX_inv, beta_ols)


def _sym(A):
    return 0.5 * (A + A.T)


def _gram(Z, d):
    """``Z' diag(d) Z`` as a dense array."""
    G = Z.T @ sp.diags(d) @ Z if sp.issparse(Z) else Z.T @ (d[:, None] * Z)
    return _sym(np.asarray(G.todense() if sp.issparse(G) else G))


def _core(params: CovParams, Z, v) -> np.ndarray:
    """``(K^-1 + Z'(sigma2 V)^-1 Z)^-1`` via the Cholesky factor of ``K``."""
    if params.sigma2 <= 0 or np.any(v <= 0):
        raise np.linalg.LinAlgError("sigma2 * V is singular; the low-rank inverse needs a positive nugget")
    lam = np.linalg.eigvalsh(params.K)
    if lam[0] <= 0:
        raise np.linalg.LinAlgError("K is not positive definite")
    if lam[-1] / lam[0] > MAX_K_CONDITION:
        raise np.linalg.LinAlgError(f"K is too ill-conditioned to invert (condition {lam[-1] / lam[0]:.3g})")
    L = cholesky(params.K, lower=True)
    G = _gram(Z, 1.0 / (params.sigma2 * v))
    # (K^-1 + G)^-1 = L (I + L'GL)^-1 L'
    inner = np.eye(len(L)) + L.T @ G @ L
    return _sym(L @ cho_solve(cho_factor(inner), L.T))


def apply_sigma_inv(model: FittedModel, v) -> np.ndarray:
    """``Sigma_K^-1 v`` by the Sherman-Morrison-Woodbury identity.

    ``v`` may be a vector or an ``n x k`` matrix.
    """
    v = np.asarray(v, float)
    if not np.all(np.isfinite(v)):
        raise ValueError("input must be finite")
    s = model.sigma2 * model.V_diag
    Z = model.Z
    u = v / (s if v.ndim == 1 else s[:, None])
    corr = Z @ (model.cached_core @ (Z.T @ u))
    return u - (corr / (s if v.ndim == 1 else s[:, None]))


def fit_gls_beta(model: FittedModel, Y=None) -> np.ndarray:
    """GLS trend coefficients ``(X'Sigma^-1 X)^-1 X'Sigma^-1 Y``."""
    Y = model.observed_Y if Y is None else np.asarray(Y, float)
    SiX = apply_sigma_inv(model, model.X)
    XtSiX = _sym(model.X.T @ SiX)
    _check_full_rank(XtSiX, "X' Sigma^-1 X", tall=False)
    return np.linalg.solve(XtSiX, SiX.T @ Y)


def predict(model: FittedModel, points, X0=None):
    """Predictions of the hidden process and their mean squared errors.

    Returns ``(Hhat, mspe)`` at ``points``. ``X0`` overrides the trend
    covariates there (required for a custom design).
    """
    pts = np.atleast_2d(np.asarray(points, float))
    Z0 = evaluate_bisquare(model.basis.resolutions, pts)
    X0 = model.design.at(pts) if X0 is None else np.atleast_2d(np.asarray(X0, float))
    KZ0 = np.asarray(Z0 @ model.K)  # rows are (K z0)'
    Hhat = X0 @ model.beta_gls + KZ0 @ model.w

    # z0'Kz0 - z0'K Z'Sigma^-1 Z K z0 = z0' core z0
    spatial = np.asarray(Z0.multiply(Z0 @ model.cached_core).sum(axis=1)).ravel()
    u = X0 - KZ0 @ model.XtSiZ.T
    trend = np.einsum("ij,ij->i", u @ model.XtSiX_inv, u)
    mspe = spatial + trend
    neg = mspe < 0
    if neg.any():
        if np.any(mspe < -1e-10):
            raise FloatingPointError("negative mean squared prediction error")
        log.warning("clamping %d roundoff-negative MSPE values to 0", int(neg.sum()))
        mspe = np.where(neg, 0.0, mspe)
    return Hhat, mspe


def fit_frk(
    grid: Grid,
    basis_counts=(4, 25),
    M: int = 100,
    trend: str = "linear",
    V=None,
    weighted: bool = False,
    max_iter: int = DEFAULT_MAX_ITER,
    pd_tol: float = PD_TOL,
    resolutions=None,
) -> FittedModel:
    """Full pipeline from an observed grid to a fitted model.

    OLS detrending, bisquare basis, binning, moment estimates and the
    positive-definite parameter fit, then the GLS trend and prediction caches.
    ``V`` is the per-location variance diagonal over the whole grid.
    """
    design = TrendDesign.from_kind(trend, grid.locations)
    beta_ols, D = detrend_ols(grid, design)
    if resolutions is None:
        resolutions = build_multires_centroids(grid, basis_counts)
    Z = evaluate_bisquare(resolutions, grid.locations)
    r = Z.shape[1]
    scheme = make_bins(grid, M, r)
    v = np.ones(grid.n) if V is None else np.asarray(V, float)
    summary = binned_moments(D, scheme, Z, v)
    if weighted:
        summary = summary.with_weights()
    params = fit_frk_params(summary, weighted=weighted, max_iter=max_iter, pd_tol=pd_tol)

    obs = grid.mask
    basis = BasisSet(tuple(resolutions), Z[obs])
    model_design = TrendDesign(design.X[obs], design.kind)
    return FittedModel.build(params, basis, model_design, grid.values[obs], v[obs], beta_ols)


def fill_raster(model: FittedModel, grid: Grid):
    """Grid values with missing cells replaced by predictions.

    Returns ``(filled, se)``; ``se`` is zero at observed cells.
    """
    filled = np.where(grid.mask, grid.values if grid.values is not None else np.nan, np.nan)
    se = np.zeros(grid.n)
    miss = ~grid.mask
    if miss.any():
        Hhat, mspe = predict(model, grid.locations[miss])
        filled[miss] = Hhat
        se[miss] = np.sqrt(mspe)
    return filled, se


def write_predictions_csv(path, points, Hhat, mspe) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "Hhat", "se"])
        for (x, y), h, m in zip(np.atleast_2d(points), Hhat, mspe):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(h)), repr(float(np.sqrt(m)))])
