"""Frobenius-norm fitting of (sigma^2, K) with a positive-definite K.

The fit minimizes ``||S - Zb K Zb' - sigma2 Vb||_F^2`` where ``S`` is the
binned moment matrix. For fixed ``sigma2`` the minimizing ``K`` is
``C - sigma2 * D`` with ``C = R^-1 Q'S Q R^-T`` and ``D = R^-1 Q'Vb Q R^-T``
(``Zb = QR``), and the profile objective in ``sigma2`` is a one-dimensional
quadratic. ``K`` is positive definite exactly when ``sigma2`` lies below
``e'Ce / e'De`` with ``e`` the minimum eigenvector of ``K``; the iterative
fit repeatedly imposes that bound until ``K`` is positive definite.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh, solve_triangular

from .binning import BinSummary, robustness_weights

log = logging.getLogger(__name__)

STRICT_MARGIN = 1e-6
PD_TOL = 1e-10
EIG_TIE_RTOL = 1e-8
DEFAULT_MAX_ITER = 100


class FitError(RuntimeError):
    """Raised when the fit cannot produce a positive-definite K."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class QRFactors:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        M, r = self.Q.shape
        if self.R.shape != (r, r):
            raise ValueError("R must be r x r for an M x r Q")
        d = np.abs(np.diag(self.R))
        if r and d.min() <= 1e-12 * d.max():
            raise np.linalg.LinAlgError("binned basis matrix is rank deficient")

    @classmethod
    def of(cls, Zbar) -> "QRFactors":
        Zbar = np.asarray(Zbar, float)
        M, r = Zbar.shape
        if M <= r:
            raise ValueError(f"need more bins than basis functions (M={M}, r={r})")
        Q, R = np.linalg.qr(Zbar, mode="reduced")
        return cls(Q, R)

    def sandwich(self, A) -> np.ndarray:
        """``R^-1 Q' A Q R^-T`` for a square ``A`` or a diagonal given as a vector."""
        QtAQ = _project(self.Q, A)
        return self.congruence(QtAQ)

    def congruence(self, B) -> np.ndarray:
        """``R^-1 B R^-T``."""
        X = solve_triangular(self.R, B, lower=False)
        X = solve_triangular(self.R, X.T, lower=False)
        return _sym(X)


def _sym(A):
    return 0.5 * (A + A.T)


def _project(Q, A):
    """``Q' A Q``; a 1-D ``A`` is read as a diagonal matrix."""
    A = np.asarray(A, float)
    if A.ndim == 1:
        if len(A) != Q.shape[0]:
            raise ValueError("dimension mismatch")
        return _sym(Q.T @ (A[:, None] * Q))
    if A.shape != (Q.shape[0], Q.shape[0]):
        raise ValueError("dimension mismatch")
    return _sym(Q.T @ A @ Q)


def _diag_inner(A, v):
    """Frobenius inner product of ``A`` with ``diag(v)`` (or a full ``v``)."""
    v = np.asarray(v, float)
    return float(np.diag(A) @ v) if v.ndim == 1 else float(np.sum(A * v))


def _fro2(A):
    A = np.asarray(A, float)
    return float(A @ A) if A.ndim == 1 else float(np.sum(A * A))


def k_hat(sigma2, qr: QRFactors, SigmaM_hat, Vbar) -> np.ndarray:
    """Closed-form Frobenius minimizer ``R^-1 Q'(S - sigma2 Vb) Q R^-T``."""
    Vbar = np.asarray(Vbar, float)
    SigmaM_hat = np.asarray(SigmaM_hat, float)
    diff = SigmaM_hat - sigma2 * (np.diag(Vbar) if Vbar.ndim == 1 else Vbar)
    return qr.sandwich(diff)


class Objective:
    """Profile problem in ``sigma2`` for one binned summary.

    Caches ``C``, ``D`` and the inner products of the projected residual
    matrices so that ``K(sigma2)``, the least-squares slope and the
    sum of squares are all cheap.
    """

    def __init__(self, SigmaM_hat, Vbar, qr: QRFactors):
        self.qr = qr
        self.SigmaM_hat = np.asarray(SigmaM_hat, float)
        self.Vbar = np.asarray(Vbar, float)
        QtSQ = _project(qr.Q, self.SigmaM_hat)
        QtVQ = _project(qr.Q, self.Vbar)
        self.C = qr.congruence(QtSQ)
        self.D = qr.congruence(QtVQ)
        # <A - PAP, B - PBP> = <A, B> - <Q'AQ, Q'BQ> for the projector P = QQ'
        self.aa = _fro2(self.SigmaM_hat) - _fro2(QtSQ.ravel())
        self.ab = _diag_inner(self.SigmaM_hat, self.Vbar) - float(np.sum(QtSQ * QtVQ))
        self.bb = _fro2(self.Vbar) - _fro2(QtVQ.ravel())
        if self.bb <= 1e-12 * _fro2(self.Vbar):
            raise ValueError("sigma^2 is not identifiable: the binned basis spans every bin (r == M)")

    @property
    def slope(self) -> float:
        return self.ab / self.bb

    def K(self, sigma2) -> np.ndarray:
        return _sym(self.C - sigma2 * self.D)

    def sse(self, sigma2):
        s = np.asarray(sigma2, float)
        return np.maximum(self.aa - 2.0 * s * self.ab + s * s * self.bb, 0.0)

    def solve(self, upper_bound=None) -> float:
        return _clamp(self.slope, upper_bound)

    def bound(self, e1) -> float:
        return quadratic_ratio(self.C, self.D, e1)


def quadratic_ratio(C, D, e) -> float:
    """``e'Ce / e'De``; for ``F = C - bD`` with minimum eigenvector ``e``,
    ``F`` is positive definite iff ``b`` is below this ratio."""
    den = float(e @ D @ e)
    if den <= 0:
        raise ValueError("nonpositive denominator: the binned variance matrix is not positive definite")
    return float(e @ C @ e) / den


def _clamp(slope, upper_bound):
    s = max(0.0, float(slope))
    if upper_bound is not None:
        if upper_bound <= 0:
            raise ValueError("upper bound must be positive")
        s = min(s, (1.0 - STRICT_MARGIN) * upper_bound)
    return s


def sigma2_ls(SigmaM_hat, Vbar, Q, upper_bound=None) -> float:
    """No-intercept least-squares slope of the projected residuals.

    Clamped below at zero and, with ``upper_bound``, above at
    ``(1 - 1e-6) * upper_bound``.
    """
    Q = np.asarray(Q, float)
    QtSQ = _project(Q, SigmaM_hat)
    QtVQ = _project(Q, Vbar)
    ab = _diag_inner(np.asarray(SigmaM_hat, float), Vbar) - float(np.sum(QtSQ * QtVQ))
    bb = _fro2(np.asarray(Vbar, float)) - _fro2(QtVQ.ravel())
    if bb <= 1e-12 * _fro2(np.asarray(Vbar, float)):
        raise ValueError("sigma^2 is not identifiable: the binned basis spans every bin (r == M)")
    return _clamp(ab / bb, upper_bound)


def min_eigenpair(K):
    """Smallest eigenvalue of symmetric ``K`` and a unit eigenvector."""
    K = np.asarray(K, float)
    w, V = eigh(K, subset_by_index=[0, 0])
    lam, e1 = float(w[0]), V[:, 0]
    e1 = e1 / np.linalg.norm(e1)
    scale = max(np.linalg.norm(K, 2), np.finfo(float).tiny)
    if np.linalg.norm(K @ e1 - lam * e1) > 1e-8 * scale:
        raise np.linalg.LinAlgError("minimum eigenpair did not converge")
    return lam, e1


def pd_upper_bound(qr: QRFactors, SigmaM_hat, Vbar, e1) -> float:
    """Ratio ``e1'C e1 / e1'D e1`` below which ``K(sigma2)`` stays positive definite."""
    y = solve_triangular(qr.R, np.asarray(e1, float), trans="T", lower=False)
    Qy = qr.Q @ y
    num = float(Qy @ np.asarray(SigmaM_hat, float) @ Qy)
    V = np.asarray(Vbar, float)
    den = float(Qy @ (V * Qy)) if V.ndim == 1 else float(Qy @ V @ Qy)
    if den <= 0:
        raise ValueError("nonpositive denominator: the binned variance matrix is not positive definite")
    return num / den


@dataclass(frozen=True)
class TraceRow:
    g: int
    sigma2: float
    lambda_min: float
    neg_eigs: int
    sse: float


@dataclass(frozen=True)
class CovParams:
    """Fitted ``(sigma2, K)`` with the factors that produced them.

    ``trace`` logs every iterate; ``sigma2_unconstrained`` is the
    nonnegative least-squares value before any bound was imposed.
    """

    sigma2: float
    K: np.ndarray
    lambda_min: float
    iterations: int
    trace: tuple[TraceRow, ...]
    sigma2_unconstrained: float
    qr: QRFactors | None = field(default=None, repr=False)
    pd_tol: float = PD_TOL
    weighted: bool = False

    @property
    def is_pd(self) -> bool:
        lam_max = float(np.linalg.eigvalsh(self.K)[-1])
        return self.lambda_min > self.pd_tol * max(1.0, abs(lam_max))

    @property
    def r(self) -> int:
        return self.K.shape[0]


def _weighted_inputs(summary: BinSummary):
    a = summary.Abar if summary.Abar is not None else robustness_weights(summary)
    s = np.sqrt(np.asarray(a, float))
    return (s[:, None] * summary.SigmaM_hat * s[None, :], s * s * summary.Vbar, s[:, None] * summary.Zbar)


def fit_frk_params(
    summary: BinSummary,
    weighted: bool = False,
    max_iter: int = DEFAULT_MAX_ITER,
    pd_tol: float = PD_TOL,
) -> CovParams:
    """Estimate ``(sigma2, K)`` so that ``K`` is positive definite.

    Start from the nonnegative least-squares ``sigma2``. While ``K(sigma2)``
    has an eigenvalue at or below ``pd_tol * max(1, |lambda_max|)``, bound
    ``sigma2`` by ``e'Ce / e'De`` at the current minimum eigenvector ``e``
    and re-solve the bounded least-squares problem. In weighted mode the
    moment matrix, ``Vbar`` and ``Zbar`` are scaled by ``Abar^{1/2}`` first.

    Raises :class:`FitError` (carrying the trace) if ``max_iter`` bounded
    solves do not reach a positive-definite ``K``.
    """
    if weighted:
        S, Vb, Zb = _weighted_inputs(summary)
    else:
        S, Vb, Zb = summary.SigmaM_hat, summary.Vbar, summary.Zbar
    if np.any(np.asarray(Vb) <= 0):
        raise ValueError("binned variances must be positive")
    qr = QRFactors.of(Zb)
    obj = Objective(S, Vb, qr)

    sigma2 = obj.solve()
    sigma2_0 = sigma2
    trace = []
    for g in range(max_iter + 1):
        K = obj.K(sigma2)
        w, V = eigh(K)
        lam, e1 = float(w[0]), V[:, 0]
        trace.append(TraceRow(g, sigma2, lam, int(np.sum(w < 0)), float(obj.sse(sigma2))))
        if lam > pd_tol * max(1.0, abs(float(w[-1]))):
            return CovParams(sigma2, K, lam, g, tuple(trace), sigma2_0, qr, pd_tol, weighted)
        if g == max_iter:
            break
        if sigma2 == 0.0:
            raise FitError("K is not positive definite even at sigma^2 = 0; the binned moment matrix is singular", trace)
        if len(w) > 1 and abs(w[1] - w[0]) <= EIG_TIE_RTOL * max(abs(w[0]), abs(w[1]), 1e-300):
            log.warning("two smallest eigenvalues of K coincide at iteration %d; bound uses one eigenvector", g)
        bound = obj.bound(e1)
        if bound <= 0:
            raise FitError("positive-definiteness bound on sigma^2 is not positive", trace)
        new = obj.solve(upper_bound=bound)
        if new >= sigma2:
            # only reachable when lambda_min sits inside [0, pd_tol]
            new = (1.0 - STRICT_MARGIN) * sigma2
        sigma2 = new
    raise FitError(f"no positive-definite K after {max_iter} iterations", trace)


def write_trace_csv(path, params_or_trace) -> None:
    trace = params_or_trace.trace if isinstance(params_or_trace, CovParams) else params_or_trace
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["g", "sigma2", "lambda_min", "neg_eigs", "sse"])
        for row in trace:
            w.writerow([row.g, repr(row.sigma2), repr(row.lambda_min), row.neg_eigs, repr(row.sse)])


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        return [
            TraceRow(int(r["g"]), float(r["sigma2"]), float(r["lambda_min"]), int(r["neg_eigs"]), float(r["sse"]))
            for r in csv.DictReader(fh)
        ]
