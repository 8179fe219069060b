import numpy as np
import pytest
from numpy.testing import assert_allclose

from messpy._lq import fd_jacobian
from messpy._profile import Profile
from messpy.model_core import DisturbanceScheme, MessData, ParamVector, residuals, simulate
from messpy.qmle import check_commute, fit_qmle, score_q, vcov_hetero, vcov_homo
from messpy.weights import from_dense

from conftest import knn_pair


def Q(data, g):
    v = residuals(data, ParamVector.from_array(g))
    return float(v @ v)


def test_score_matches_fd(small_data):
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = np.r_[rng.normal(1, 0.5, 3), rng.uniform(-2, 2, 2)]
        an = score_q(small_data, ParamVector.from_array(g))
        fd = fd_jacobian(lambda x: np.array([Q(small_data, x)]), g, 1e-5)[0]
        assert np.max(np.abs(an - fd)) <= 1e-6 * max(1.0, np.abs(an).max())


def test_fit_recovers_truth_and_zero_score(small_data):
    fit = fit_qmle(small_data)
    assert fit.converged and not fit.flags
    assert fit.info["score_norm"] < 1e-6
    assert abs(fit.params.lam - 0.4) < 0.3 and abs(fit.params.rho - 0.3) < 0.5
    assert np.all(np.linalg.eigvalsh(fit.vcov) > 0)


def test_beta_at_origin_is_ols(small_data):
    prof = Profile(small_data)
    b = prof.beta(0.0, 0.0)
    ols = np.linalg.lstsq(small_data.X, small_data.Y, rcond=None)[0]
    assert_allclose(b, ols, rtol=1e-10)


def test_beta_block_vanishes_at_normal_equations(small_data):
    prof = Profile(small_data)
    b = prof.beta(0.3, -0.2)
    s = score_q(small_data, ParamVector(b, 0.3, -0.2))
    assert np.abs(s[:3]).max() < 1e-8


def test_rho_block_zero_when_v_zero(small_design):
    W, M, X = small_design
    data = simulate(W, M, X, [1, 1, 1], 0.2, 0.4, DisturbanceScheme(scale=0.0))
    s = score_q(data, ParamVector([1, 1, 1], 0.2, 0.4))
    assert abs(s[-1]) < 1e-10


def test_commuting_sandwich_collapses():
    W, _ = knn_pair(300, seed=3)
    X = np.column_stack([np.ones(300), np.random.default_rng(1).standard_normal((300, 2))])
    data = simulate(W, W, X, [1, 1, 1], 0.5, -0.5, DisturbanceScheme("std_chisq3"), seed=2)
    fit = fit_qmle(data)
    from messpy.qmle import ab_matrices
    from messpy.model_core import sample_moments

    s2, m3, m4 = sample_moments(fit.residuals)
    A, _ = ab_matrices(data, fit.params, s2, m3, m4)
    naive = 2 * s2 * np.linalg.inv(A) / data.n  # Q is twice the SSR so A carries a factor 2
    rel = np.abs(fit.vcov - naive).max() / np.abs(naive).max()
    assert rel < 0.05


def test_hetero_vcov_close_to_homo_on_homoskedastic_data():
    W, M = knn_pair(400, seed=4)
    X = np.column_stack([np.ones(400), np.random.default_rng(2).standard_normal((400, 2))])
    data = simulate(W, M, X, [1, 1, 1], 0.5, 0.5, seed=5)
    fit = fit_qmle(data)
    Vh = vcov_hetero(fit, data)
    ratio = np.sqrt(np.diag(Vh) / np.diag(vcov_homo(fit, data)))
    assert np.all(np.abs(ratio - 1) < 0.2)


def test_check_commute():
    W, M = knn_pair(50, seed=2)
    assert check_commute(W, W) == (True, 0.0)
    W2 = from_dense(W.dense() @ W.dense() - np.diag(np.diag(W.dense() @ W.dense())))
    ok, norm = check_commute(W, M)
    assert not ok and norm > 0
    ok, _ = check_commute(W, from_dense(np.zeros((50, 50))))
    assert ok


def test_w_squared_commutes():
    W, _ = knn_pair(40, seed=6)
    D = W.dense()
    ok, norm = check_commute(D, D @ D)
    assert ok or norm < 1e-12


def test_boundary_flag():
    W, M = knn_pair(60, seed=7)
    X = np.column_stack([np.ones(60), np.random.default_rng(3).standard_normal(60)])
    data = simulate(W, M, X, [1, 1], 1.8, 0.0, seed=1)
    fit = fit_qmle(data, c_bound=1.0)
    assert "boundary" in fit.flags


def test_unknown_vcov_kind(small_data):
    with pytest.raises(ValueError):
        fit_qmle(small_data, vcov="robust")
