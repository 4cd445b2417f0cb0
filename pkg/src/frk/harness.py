"""Simulation, sigma^2 scans and cross-validated comparison of predictors."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky
from scipy.spatial.distance import cdist

from .binning import BinSummary, TrendDesign, detrend_ols, trend_matrix
from .estimation import DEFAULT_MAX_ITER, PD_TOL, FitError, Objective, QRFactors, _weighted_inputs
from .grid import Grid, regular_grid
from .predictor import fit_frk, predict

log = logging.getLogger(__name__)

MAX_DENSE_N = 10_000


@dataclass(frozen=True)
class SimSpec:
    """Exponential-covariance Gaussian field plus trend and white noise.

    Defaults match the 60 x 60 unit-spaced experiment: partial sill 5.5,
    range 1, nugget 1.375 and zero trend.
    """

    nrows: int = 60
    ncols: int = 60
    spacing: float = 1.0
    partial_sill: float = 5.5
    range: float = 1.0
    nugget: float = 1.375
    beta: tuple[float, ...] = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.partial_sill < 0 or self.nugget < 0:
            raise ValueError("partial sill and nugget must be nonnegative")
        if self.range <= 0:
            raise ValueError("range must be positive")
        if len(self.beta) not in (1, 3):
            raise ValueError("beta needs 1 (constant) or 3 (linear) coefficients")


def simulate_gp(spec: SimSpec) -> Grid:
    """Draw ``Y = X beta + W + eps`` on a regular grid, fully observed.

    ``Cov(W(s), W(t)) = partial_sill * exp(-|s - t| / range)`` and ``eps``
    is iid ``N(0, nugget)``. Uses a dense Cholesky factor, so the grid is
    capped at 10,000 locations.
    """
    n = spec.nrows * spec.ncols
    if n > MAX_DENSE_N:
        raise ValueError(
            f"{n} locations is too many for dense simulation (limit {MAX_DENSE_N}); "
            "use synthetic_field for large scale tests"
        )
    grid = regular_grid(spec.nrows, spec.ncols, spec.spacing)
    rng = np.random.default_rng(spec.seed)
    kind = "constant" if len(spec.beta) == 1 else "linear"
    y = trend_matrix(kind, grid.locations) @ np.asarray(spec.beta, float)
    z = rng.standard_normal(n)
    if spec.partial_sill > 0:
        C = spec.partial_sill * np.exp(-cdist(grid.locations, grid.locations) / spec.range)
        y = y + cholesky(C, lower=True, overwrite_a=True, check_finite=False) @ z
    eps = rng.standard_normal(n)
    y = y + np.sqrt(spec.nugget) * eps
    return Grid(grid.locations, y, shape=grid.shape)


def synthetic_field(nrows: int, ncols: int, seed: int = 0, noise: float = 0.25, spacing: float = 1.0) -> Grid:
    """Cheap smooth field (random Fourier modes plus noise) for large grids."""
    grid = regular_grid(nrows, ncols, spacing)
    rng = np.random.default_rng(seed)
    span = spacing * max(nrows, ncols)
    freqs = rng.normal(scale=6.0 / span, size=(20, 2))
    phase = rng.uniform(0, 2 * np.pi, 20)
    amp = rng.normal(size=20) / np.sqrt(20)
    signal = np.cos(grid.locations @ freqs.T + phase) @ amp
    y = signal + np.sqrt(noise) * rng.standard_normal(grid.n)
    return Grid(grid.locations, y, shape=grid.shape)


def sigma2_scan(summary: BinSummary, n_points: int = 1500, weighted: bool = False) -> dict:
    """``lambda_min(K(sigma2))`` and the profile sum of squares on a grid.

    The grid runs evenly from 0 to 1.5 times the unconstrained least-squares
    ``sigma2``. Returns a dict of equal-length arrays plus the scalar
    ``unconstrained`` and ``largest_feasible`` (largest grid value whose
    ``K`` has a positive minimum eigenvalue, NaN if none).
    """
    if weighted:
        S, Vb, Zb = _weighted_inputs(summary)
    else:
        S, Vb, Zb = summary.SigmaM_hat, summary.Vbar, summary.Zbar
    obj = Objective(S, Vb, QRFactors.of(Zb))
    s0 = obj.solve()
    top = 1.5 * s0 if s0 > 0 else 1.5 * float(np.mean(np.diag(S)) / np.mean(Vb))
    sigma2 = np.linspace(0.0, top, n_points)
    lam = np.array([np.linalg.eigvalsh(obj.K(s))[0] for s in sigma2])
    sse = obj.sse(sigma2)
    feasible = sigma2[lam > 0]
    return dict(
        sigma2=sigma2,
        lambda_min=lam,
        sse=sse,
        unconstrained=s0,
        largest_feasible=float(feasible.max()) if feasible.size else float("nan"),
        step=float(sigma2[1] - sigma2[0]) if n_points > 1 else 0.0,
    )


def write_scan_csv(path, scan: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma2", "lambda_min", "sse"])
        for row in zip(scan["sigma2"], scan["lambda_min"], scan["sse"]):
            w.writerow([repr(float(v)) for v in row])


# -- cross-validation -------------------------------------------------------

@dataclass(frozen=True)
class CvReport:
    method: str
    fraction: float
    reps: int
    mean_mspe: float
    std_mspe: float
    wall_time: float
    failed: int = 0
    mspes: tuple[float, ...] = field(default=(), repr=False)


def ols_method(trend: str = "linear"):
    """Trend-only predictor fitted by OLS."""

    def fit_predict(train: Grid, points):
        design = TrendDesign.from_kind(trend, train.locations)
        beta, _ = detrend_ols(train, design)
        return trend_matrix(trend, points) @ beta

    return fit_predict


def frk_method(
    basis_counts=(4, 25),
    M: int = 100,
    trend: str = "linear",
    weighted: bool = False,
    max_iter: int = DEFAULT_MAX_ITER,
    pd_tol: float = PD_TOL,
):
    """Low-rank kriging predictor with the positive-definite fit."""

    def fit_predict(train: Grid, points):
        model = fit_frk(train, basis_counts, M, trend, weighted=weighted, max_iter=max_iter, pd_tol=pd_tol)
        Hhat, _ = predict(model, points)
        return Hhat

    return fit_predict


def holdout_splits(n_observed: int, fraction: float, reps: int, seed: int):
    """Yield ``reps`` boolean test masks over the observed locations."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n_test = int(round(fraction * n_observed))
    if n_test < 1 or n_test >= n_observed:
        raise ValueError("holdout leaves no test or no training data")
    for child in np.random.SeedSequence(seed).spawn(reps):
        test = np.zeros(n_observed, bool)
        test[np.random.default_rng(child).choice(n_observed, n_test, replace=False)] = True
        yield test


_FIT_ERRORS = (FitError, np.linalg.LinAlgError, ValueError, FloatingPointError)


def cross_validate(grid: Grid, methods: dict, fraction: float = 0.15, reps: int = 50, seed: int = 0) -> list[CvReport]:
    """Holdout mean squared prediction error of each method.

    ``methods`` maps names to ``fit_predict(train_grid, points) -> Hhat``.
    Every method sees the same splits. A rep on which a method fails is
    logged and left out of that method's aggregate.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    obs_idx = np.flatnonzero(grid.mask)
    results = {name: [] for name in methods}
    failed = dict.fromkeys(methods, 0)
    clock = dict.fromkeys(methods, 0.0)
    for rep, test_obs in enumerate(holdout_splits(len(obs_idx), fraction, reps, seed)):
        test_idx = obs_idx[test_obs]
        train_mask = grid.mask.copy()
        train_mask[test_idx] = False
        train = grid.with_mask(train_mask)
        pts, y = grid.locations[test_idx], grid.values[test_idx]
        for name, fit_predict in methods.items():
            t0 = time.perf_counter()
            try:
                Hhat = fit_predict(train, pts)
            except _FIT_ERRORS as exc:
                log.warning("method %s failed on rep %d: %s", name, rep, exc)
                failed[name] += 1
                continue
            finally:
                clock[name] += time.perf_counter() - t0
            results[name].append(float(np.mean((y - Hhat) ** 2)))

    reports = []
    for name in methods:
        m = np.array(results[name])
        reports.append(
            CvReport(
                name,
                fraction,
                len(m),
                float(m.mean()) if m.size else float("nan"),
                float(m.std(ddof=1)) if m.size > 1 else 0.0,
                clock[name],
                failed[name],
                tuple(m),
            )
        )
    return reports


def write_cv_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "fraction", "reps", "failed", "mean_mspe", "std_mspe", "wall_time"])
        for r in reports:
            w.writerow([r.method, r.fraction, r.reps, r.failed, repr(r.mean_mspe), repr(r.std_mspe), f"{r.wall_time:.3f}"])
