import numpy as np
import pytest
from conftest import random_spd, synthetic_summary
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import eigh

from frk.binning import BinSummary
from frk.estimation import (
    STRICT_MARGIN,
    FitError,
    Objective,
    QRFactors,
    fit_frk_params,
    k_hat,
    min_eigenpair,
    pd_upper_bound,
    read_trace_csv,
    sigma2_ls,
    write_trace_csv,
)


def _frob_sse(S, Zb, V, K, s2):
    return float(np.sum((S - Zb @ K @ Zb.T - s2 * np.diag(V)) ** 2))


def _joint_lstsq(S, Zb, V):
    """Least squares over (vec K, sigma2) by brute vectorization."""
    M, r = Zb.shape
    A = np.column_stack([np.kron(Zb, Zb), np.diag(V).ravel()])
    sol, *_ = np.linalg.lstsq(A, S.ravel(), rcond=None)
    K = sol[:-1].reshape(r, r)
    return 0.5 * (K + K.T), sol[-1]


def test_k_hat_at_zero_of_pd_moment_matrix():
    rng = np.random.default_rng(1)
    Zb = rng.uniform(size=(12, 3))
    S = random_spd(rng, 12)
    K = k_hat(0.0, QRFactors.of(Zb), S, np.ones(12))
    assert np.linalg.eigvalsh(K)[0] > 0


def test_k_hat_vanishes_when_moments_equal_noise():
    rng = np.random.default_rng(2)
    Zb = rng.uniform(size=(9, 2))
    V = rng.uniform(0.5, 2, 9)
    np.testing.assert_allclose(k_hat(1.0, QRFactors.of(Zb), np.diag(V), V), 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_k_hat_matches_vectorized_least_squares(seed):
    rng = np.random.default_rng(seed)
    M, r = 5, 2
    Zb = rng.uniform(size=(M, r))
    S = random_spd(rng, M)
    V = rng.uniform(0.5, 2, M)
    s2 = rng.uniform(0, 1)
    A = np.kron(Zb, Zb)
    vecK, *_ = np.linalg.lstsq(A, (S - s2 * np.diag(V)).ravel(), rcond=None)
    np.testing.assert_allclose(k_hat(s2, QRFactors.of(Zb), S, V), vecK.reshape(r, r), atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_sigma2_matches_joint_least_squares(seed):
    rng = np.random.default_rng(seed)
    s = synthetic_summary(rng, 15, 3, Vbar=rng.uniform(0.5, 2.0, 15))
    K_ref, s2_ref = _joint_lstsq(s.SigmaM_hat, s.Zbar, s.Vbar)
    obj = Objective(s.SigmaM_hat, s.Vbar, QRFactors.of(s.Zbar))
    assert obj.slope == pytest.approx(s2_ref, rel=1e-9)
    np.testing.assert_allclose(obj.K(obj.slope), K_ref, atol=1e-8)
    assert float(obj.sse(obj.slope)) == pytest.approx(_frob_sse(s.SigmaM_hat, s.Zbar, s.Vbar, K_ref, s2_ref), rel=1e-8)


def test_sigma2_recovers_pure_noise_scale():
    rng = np.random.default_rng(3)
    Zb = rng.uniform(size=(20, 4))
    V = rng.uniform(0.5, 2, 20)
    assert sigma2_ls(3.7 * np.diag(V), V, QRFactors.of(Zb).Q) == pytest.approx(3.7, rel=1e-12)


def test_sigma2_clamped_at_zero():
    rng = np.random.default_rng(4)
    Zb = rng.uniform(size=(20, 4))
    assert sigma2_ls(-np.eye(20), np.ones(20), QRFactors.of(Zb).Q) == 0.0


def test_bounded_sigma2_matches_brute_force():
    rng = np.random.default_rng(5)
    s = synthetic_summary(rng, 20, 3)
    qr = QRFactors.of(s.Zbar)
    free = sigma2_ls(s.SigmaM_hat, s.Vbar, qr.Q)
    bound = 0.5 * free
    got = sigma2_ls(s.SigmaM_hat, s.Vbar, qr.Q, upper_bound=bound)
    assert got == (1 - STRICT_MARGIN) * bound
    grid = np.linspace(0, (1 - STRICT_MARGIN) * bound, 2001)
    sse = [_frob_sse(s.SigmaM_hat, s.Zbar, s.Vbar, k_hat(t, qr, s.SigmaM_hat, s.Vbar), t) for t in grid]
    assert grid[int(np.argmin(sse))] == pytest.approx(got, rel=1e-12)


def test_bound_above_optimum_is_inactive():
    rng = np.random.default_rng(6)
    s = synthetic_summary(rng, 20, 3)
    Q = QRFactors.of(s.Zbar).Q
    free = sigma2_ls(s.SigmaM_hat, s.Vbar, Q)
    assert sigma2_ls(s.SigmaM_hat, s.Vbar, Q, upper_bound=2 * free) == free


def test_sigma2_needs_more_bins_than_basis():
    rng = np.random.default_rng(7)
    with pytest.raises(ValueError):
        QRFactors.of(rng.uniform(size=(4, 4)))
    Q, _ = np.linalg.qr(rng.uniform(size=(4, 4)))
    with pytest.raises(ValueError, match="identifiable"):
        sigma2_ls(np.eye(4), np.ones(4), Q)


def test_rank_deficient_binned_basis():
    Zb = np.ones((6, 2))
    with pytest.raises(np.linalg.LinAlgError):
        QRFactors.of(Zb)


def test_min_eigenpair_identity_and_diagonal():
    lam, e = min_eigenpair(np.eye(4))
    assert lam == pytest.approx(1.0)
    assert np.linalg.norm(e) == pytest.approx(1.0)
    lam, e = min_eigenpair(np.diag([3.0, -2.0, 5.0]))
    assert lam == -2.0
    np.testing.assert_allclose(np.abs(e), [0, 1, 0], atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 10))
def test_min_eigenpair_random_symmetric(seed, r):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((r, r))
    A = A + A.T
    lam, e = min_eigenpair(A)
    assert lam == pytest.approx(np.linalg.eigvalsh(A)[0], abs=1e-10)
    np.testing.assert_allclose(A @ e, lam * e, atol=1e-9 * max(1, np.abs(A).max()))


def test_pd_bound_of_identity_forms():
    Zb = np.vstack([np.eye(3), np.eye(3)])
    qr = QRFactors.of(Zb)
    e = np.array([1.0, 0.0, 0.0])
    assert pd_upper_bound(qr, np.eye(6), np.ones(6), e) == pytest.approx(1.0)
    # the explicit form agrees with the cached-matrix ratio
    obj = Objective(np.eye(6), np.ones(6), qr)
    assert obj.bound(e) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(6))
def test_pd_bound_predicts_sign_change(seed):
    rng = np.random.default_rng(seed)
    r = 4
    C = random_spd(rng, r, 0.1, 3.0)
    D = random_spd(rng, r, 0.5, 2.0)
    # exact threshold: smallest generalized eigenvalue of (C, D)
    b_star = eigh(C, D, eigvals_only=True)[0]
    for b in np.linspace(0, 2 * b_star, 200):
        lam, e = min_eigenpair(C - b * D)
        u = float(e @ C @ e) / float(e @ D @ e)
        # b < u exactly when C - bD is PD, up to rounding at the threshold
        if abs(b - b_star) > 1e-9 * b_star:
            assert (lam > 0) == (b < u) == (b < b_star)


def test_fit_skips_iterations_when_unconstrained_is_pd():
    rng = np.random.default_rng(8)
    Zb = rng.uniform(size=(30, 4))
    K = random_spd(rng, 4)
    V = rng.uniform(0.5, 2, 30)
    S = Zb @ K @ Zb.T + 0.8 * np.diag(V)
    p = fit_frk_params(BinSummary(np.zeros(30), S, Zb, V, np.full(30, 5)))
    assert p.iterations == 0
    assert p.sigma2 == pytest.approx(0.8)
    np.testing.assert_allclose(p.K, K, atol=1e-9)
    assert p.sigma2_unconstrained == p.sigma2


@pytest.mark.parametrize("seed", range(10))
def test_fit_trace_is_monotone(seed):
    rng = np.random.default_rng(seed)
    p = fit_frk_params(synthetic_summary(rng, 25, 4))
    assert p.is_pd
    s2 = [t.sigma2 for t in p.trace]
    lam = [t.lambda_min for t in p.trace]
    sse = [t.sse for t in p.trace]
    assert all(a > b for a, b in zip(s2, s2[1:]))
    assert all(a < b for a, b in zip(lam, lam[1:]))
    assert all(a <= b * (1 + 1e-12) for a, b in zip(sse, sse[1:]))
    assert p.trace[-1].neg_eigs == 0
    assert p.sigma2 < p.sigma2_unconstrained


@pytest.mark.parametrize("seed", range(5))
def test_fit_is_near_exact_threshold(seed):
    rng = np.random.default_rng(seed)
    s = synthetic_summary(rng, 25, 4)
    p = fit_frk_params(s)
    obj = Objective(s.SigmaM_hat, s.Vbar, QRFactors.of(s.Zbar))
    b_star = eigh(obj.C, obj.D, eigvals_only=True)[0]
    assert p.sigma2 < b_star
    assert p.sigma2 == pytest.approx(b_star, rel=1e-4)


def test_weighted_with_unit_weights_equals_unweighted():
    rng = np.random.default_rng(9)
    s = synthetic_summary(rng, 25, 4)
    a = fit_frk_params(s)
    b = fit_frk_params(s.with_weights(np.ones(s.M)), weighted=True)
    assert a.sigma2 == b.sigma2
    np.testing.assert_array_equal(a.K, b.K)


def test_weighted_fit_differs_with_real_weights(sim_summary):
    a = fit_frk_params(sim_summary)
    b = fit_frk_params(sim_summary.with_weights(), weighted=True)
    assert b.is_pd and b.weighted
    assert a.sigma2 != b.sigma2


@pytest.mark.parametrize("c", [0.01, 3.0, 250.0])
def test_vbar_rescaling_rescales_sigma2_only(c):
    rng = np.random.default_rng(10)
    s = synthetic_summary(rng, 25, 4, Vbar=rng.uniform(0.5, 2.0, 25))
    a = fit_frk_params(s)
    b = fit_frk_params(BinSummary(s.Dbar, s.SigmaM_hat, s.Zbar, c * s.Vbar, s.bin_counts))
    assert b.sigma2 == pytest.approx(a.sigma2 / c, rel=1e-10)
    np.testing.assert_allclose(b.K, a.K, atol=1e-10 * np.abs(a.K).max())


def test_fit_reports_iteration_budget():
    rng = np.random.default_rng(11)
    s = synthetic_summary(rng, 25, 4)
    with pytest.raises(FitError) as info:
        fit_frk_params(s, max_iter=1)
    assert len(info.value.trace) == 2


def test_fit_rejects_nonpositive_vbar():
    rng = np.random.default_rng(12)
    s = synthetic_summary(rng, 10, 2, Vbar=np.r_[0.0, np.ones(9)])
    with pytest.raises(ValueError):
        fit_frk_params(s)


def test_fit_fails_when_moments_singular_at_zero():
    Zb = np.random.default_rng(13).uniform(size=(10, 2))
    S = -np.eye(10)
    with pytest.raises(FitError):
        fit_frk_params(BinSummary(np.zeros(10), S, Zb, np.ones(10), np.ones(10)))


def test_trace_csv_round_trip(tmp_path):
    p = fit_frk_params(synthetic_summary(np.random.default_rng(14), 25, 4))
    write_trace_csv(tmp_path / "t.csv", p)
    assert read_trace_csv(tmp_path / "t.csv") == list(p.trace)
