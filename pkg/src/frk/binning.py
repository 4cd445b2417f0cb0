"""Detrending, spatial binning and binned method-of-moments quantities."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .grid import BasisSet, Grid, lattice_centers

log = logging.getLogger(__name__)

TREND_KINDS = ("constant", "linear")


def trend_matrix(kind: str, locations) -> np.ndarray:
    """Trend covariates: ``(1,)`` for constant, ``(1, x, y)`` for linear."""
    locs = np.atleast_2d(np.asarray(locations, float))
    ones = np.ones((len(locs), 1))
    if kind == "constant":
        return ones
    if kind == "linear":
        return np.hstack([ones, locs])
    raise ValueError(f"unknown trend kind {kind!r}; expected one of {TREND_KINDS}")


@dataclass(frozen=True)
class TrendDesign:
    """``n x p`` trend design matrix; ``kind`` regenerates it at new points."""

    X: np.ndarray
    kind: str = "custom"

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_kind(cls, kind: str, locations) -> "TrendDesign":
        return cls(trend_matrix(kind, locations), kind)

    def at(self, points) -> np.ndarray:
        if self.kind == "custom":
            raise ValueError("a custom design cannot be evaluated at new points; pass X0 explicitly")
        return trend_matrix(self.kind, points)


def _check_full_rank(X: np.ndarray, what: str = "design matrix", tall: bool = True) -> None:
    n, p = X.shape
    if (p >= n if tall else p > n) or np.linalg.matrix_rank(X) < p:
        raise np.linalg.LinAlgError(f"{what} is rank deficient ({n}x{p})")


def detrend_ols(grid: Grid, design: TrendDesign):
    """OLS trend fit on the observed rows.

    Returns ``(beta, D)`` where ``D`` holds residuals at observed rows and
    NaN at missing rows.
    """
    mask = grid.mask
    if mask.sum() < design.p:
        raise ValueError("fewer observations than trend coefficients")
    X = design.X[mask]
    _check_full_rank(X)
    beta, *_ = np.linalg.lstsq(X, grid.values[mask], rcond=None)
    D = np.full(grid.n, np.nan)
    D[mask] = grid.values[mask] - X @ beta
    return beta, D


@dataclass(frozen=True)
class BinScheme:
    """Bin centers and a partition of the observed locations.

    ``labels[i]`` is the bin of location ``i``, or -1 if ``i`` is missing.
    """

    centers: np.ndarray
    labels: np.ndarray

    @property
    def M(self) -> int:
        return len(self.centers)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.M)

    @property
    def membership(self) -> list[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        srt = self.labels[order]
        return [order[np.searchsorted(srt, m, "left"):np.searchsorted(srt, m, "right")] for m in range(self.M)]

    def indicator(self) -> sp.csr_matrix:
        """Sparse ``M x n`` matrix of the neighborhood indicators ``w_mi``."""
        obs = np.flatnonzero(self.labels >= 0)
        return sp.csr_matrix(
            (np.ones(len(obs)), (self.labels[obs], obs)), shape=(self.M, len(self.labels))
        )


def assign_bins(locations, mask, centers) -> np.ndarray:
    """Nearest-center labels for masked locations; ties go to the lowest index."""
    locations = np.asarray(locations, float)
    labels = np.full(len(locations), -1, dtype=np.intp)
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return labels
    k = min(2, len(centers))
    dist, nn = cKDTree(centers).query(locations[idx], k=k)
    if k == 1:
        labels[idx] = nn
        return labels
    best = nn[:, 0]
    tie = np.isclose(dist[:, 0], dist[:, 1], rtol=1e-12, atol=1e-12)
    if tie.any():
        # resolve exact ties over every equidistant center, not just the top two
        for j in np.flatnonzero(tie):
            d = np.linalg.norm(centers - locations[idx[j]], axis=1)
            best[j] = np.flatnonzero(np.isclose(d, d.min(), rtol=1e-12, atol=1e-12))[0]
    labels[idx] = best
    return labels


def make_bins(grid: Grid, M: int, r: int | None = None) -> BinScheme:
    """Lattice of ``M`` bin centers over the grid's bounding box.

    Each observed location joins its nearest center. Bins left empty are
    dropped with a warning. If ``r`` is given, at least ``r + 1`` bins must
    survive.
    """
    if M < 1:
        raise ValueError("M must be positive")
    if M > grid.n_observed:
        raise ValueError(f"M={M} exceeds the {grid.n_observed} observed locations")
    if r is not None and M <= r:
        raise ValueError(f"need more bins than basis functions (M={M}, r={r})")
    lo, hi = grid.bbox()
    centers, _ = lattice_centers(lo, hi, M)
    labels = assign_bins(grid.locations, grid.mask, centers)

    counts = np.bincount(labels[labels >= 0], minlength=M)
    keep = counts > 0
    if not keep.all():
        log.warning("dropping %d empty bins of %d", int((~keep).sum()), M)
        remap = np.cumsum(keep) - 1
        labels = np.where(labels >= 0, remap[np.maximum(labels, 0)], -1)
        centers = centers[keep]
    if r is not None and len(centers) <= r:
        raise ValueError(f"only {len(centers)} nonempty bins remain; need more than r={r}")
    return BinScheme(centers, labels)


@dataclass(frozen=True)
class BinSummary:
    """Binned quantities for covariance estimation.

    ``Vbar`` and ``Abar`` hold the diagonals of the corresponding diagonal
    matrices.
    """

    Dbar: np.ndarray
    SigmaM_hat: np.ndarray
    Zbar: np.ndarray
    Vbar: np.ndarray
    bin_counts: np.ndarray
    Abar: np.ndarray | None = None
    centers: np.ndarray | None = None

    @property
    def M(self) -> int:
        return len(self.Dbar)

    @property
    def r(self) -> int:
        return self.Zbar.shape[1]

    @property
    def VD(self) -> np.ndarray:
        return np.diag(self.SigmaM_hat).copy()

    def with_weights(self, Abar=None) -> "BinSummary":
        return replace(self, Abar=robustness_weights(self) if Abar is None else np.asarray(Abar, float))


def binned_moments(residuals, scheme: BinScheme, basis, V=None) -> BinSummary:
    """Bin means, the moment estimate of their covariance, and binned Z and V.

    ``basis`` is a :class:`BasisSet` (or its ``n x r`` evaluation matrix) at
    the grid locations. ``V`` is the diagonal of the measurement-variance
    matrix, identity when omitted.
    """
    D = np.asarray(residuals, float)
    Z = basis.evaluation if isinstance(basis, BasisSet) else basis
    n = len(D)
    if Z.shape[0] != n or len(scheme.labels) != n:
        raise ValueError("residuals, basis rows and bin labels must have equal length")
    v = np.ones(n) if V is None else np.asarray(V, float)

    W = scheme.indicator()
    counts = np.asarray(W.sum(axis=1)).ravel()
    if np.any(counts == 0):
        raise ValueError("empty bin: its variance V_D would be infinite; drop it before binning")
    obs = scheme.labels >= 0
    if not np.all(np.isfinite(D[obs])):
        raise ValueError("residuals must be finite at binned locations")
    Dz = np.where(obs, D, 0.0)

    Dbar = (W @ Dz) / counts
    VD = (W @ (Dz * Dz)) / counts
    Sigma = np.outer(Dbar, Dbar)
    np.fill_diagonal(Sigma, VD)
    Zbar = np.asarray((W @ Z).todense() if sp.issparse(Z) else W @ Z) / counts[:, None]
    # w_m' V w_m / w_m' 1 ; identity V gives 1 in every bin
    Vbar = (W @ np.where(obs, v, 0.0)) / counts
    return BinSummary(Dbar, Sigma, Zbar, Vbar, counts, centers=scheme.centers)


def robustness_weights(summary: BinSummary) -> np.ndarray:
    """Per-bin weights ``2^{-1/2} sqrt(count) / V_D``."""
    VD = summary.VD
    if np.any(VD <= 0):
        raise ValueError(
            "some bin has zero residual variance; use unweighted estimation or merge bins"
        )
    return np.sqrt(summary.bin_counts / 2.0) / VD


def write_bin_diagnostics(path, summary: BinSummary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["center_x", "center_y", "count", "Dbar", "VD"])
        centers = summary.centers if summary.centers is not None else np.full((summary.M, 2), np.nan)
        for (cx, cy), c, d, vd in zip(centers, summary.bin_counts, summary.Dbar, summary.VD):
            w.writerow([cx, cy, int(c), repr(float(d)), repr(float(vd))])
