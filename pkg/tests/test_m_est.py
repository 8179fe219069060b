import numpy as np
import pytest
import scipy.linalg
from numpy.testing import assert_allclose

from messpy._lq import fd_jacobian
from messpy._profile import Profile
from messpy.m_est import (adjusted_score, beta_m, concentrated_score, fit_m, identification_diagnostics,
                          omega_matrix, psi_matrix, wd_matrix)
from messpy.model_core import DisturbanceScheme, ParamVector, residuals, simulate
from messpy.qmle import fit_qmle


def dense_wd(W, M, rho):
    R = scipy.linalg.expm(rho * M.dense())
    B = R @ W.dense() @ np.linalg.inv(R)
    return B - np.diag(np.diag(B))


def test_wd_special_cases(small_design):
    W, M, _ = small_design
    assert_allclose(wd_matrix(W, M, 0.0).dense(), W.dense(), atol=1e-14)
    assert_allclose(wd_matrix(W, W, 1.3).dense(), W.dense(), atol=1e-10)
    Wd = wd_matrix(W, M, -0.8).dense()
    assert np.all(np.diag(Wd) == 0)


def test_wd_operator_matches_dense(small_design):
    W, M, _ = small_design
    op = wd_matrix(W, M, 0.9)
    x = np.random.default_rng(0).standard_normal(80)
    D = dense_wd(W, M, 0.9)
    assert_allclose(op.apply(x), D @ x, atol=1e-10)
    assert_allclose(op.apply_t(x), D.T @ x, atol=1e-10)


def test_wd_derivative_matches_fd_and_naive_form_does_not(small_design):
    W, M, _ = small_design
    rho, h = 0.7, 1e-5
    fd = (dense_wd(W, M, rho + h) - dense_wd(W, M, rho - h)) / (2 * h)
    op = wd_matrix(W, M, rho)
    ours = np.column_stack([op.deriv_apply(e) for e in np.eye(80)])
    assert np.abs(ours - fd).max() <= 1e-6 * np.abs(fd).max()
    Wd, Md = dense_wd(W, M, rho), M.dense()
    C = Md @ Wd - Wd @ Md
    naive = C - np.diag(np.diag(C))
    assert np.abs(naive - fd).max() > 1e-3 * np.abs(fd).max()


def test_beta_m_examples(small_data):
    ols = np.linalg.lstsq(small_data.X, small_data.Y, rcond=None)[0]
    assert_allclose(beta_m(small_data, (0.0, 0.0)), ols, rtol=1e-10)
    assert_allclose(beta_m(small_data, (0.3, -0.4)), Profile(small_data).beta(0.3, -0.4), rtol=1e-8)


def test_rho_score_is_quadratic_form(small_data):
    zeta = (0.2, 0.1)
    b = beta_m(small_data, zeta)
    V = residuals(small_data, ParamVector(b, *zeta))
    s = concentrated_score(small_data, zeta)
    assert s[1] == pytest.approx(-V @ (small_data.M @ V), rel=1e-10)


def test_psi_matches_fd(small_data):
    rng = np.random.default_rng(1)
    for _ in range(10):
        g = np.r_[rng.normal(1, 0.3, 3), rng.uniform(-1.5, 1.5, 2)]
        p = ParamVector.from_array(g)
        an = -small_data.n * psi_matrix(small_data, p)
        fd = fd_jacobian(lambda x: adjusted_score(small_data, ParamVector.from_array(x)), g, 1e-5)
        assert np.abs(an - fd).max() <= 1e-5 * np.abs(fd).max()
    P = psi_matrix(small_data, p)
    k = 3
    assert_allclose(P[:k, :k], P[:k, :k].T)
    assert np.all(np.linalg.eigvalsh(P[:k, :k]) > 0)
    assert_allclose(P[k + 1, :k], P[:k, k + 1])


def test_omega_psd_and_zero_variance(small_design):
    W, M, X = small_design
    data = simulate(W, M, X, [1, 1, 1], 0.3, 0.2, seed=4)
    p = ParamVector([1, 1, 1], 0.3, 0.2)
    Om = omega_matrix(data, p, np.full(80, 1.5))
    assert_allclose(Om, Om.T, atol=1e-12)
    assert np.linalg.eigvalsh(Om).min() > -1e-10
    # every term carries Sigma, so zero variance gives a zero matrix
    assert np.abs(omega_matrix(data, p, np.zeros(80))).max() == 0
    R = scipy.linalg.expm(0.2 * M.dense())
    Wd = dense_wd(W, M, 0.2)
    m = Wd.T @ R @ X @ np.ones(3)
    Om1 = omega_matrix(data, p, np.ones(80)) * 80
    assert Om1[3, 3] == pytest.approx(m @ m + np.trace(Wd @ (Wd + Wd.T)), rel=1e-8)


def test_fit_m_close_to_qmle_on_homoskedastic_data(small_data):
    me, q = fit_m(small_data), fit_qmle(small_data, vcov=None)
    assert me.converged and me.info["score_norm"] < 1e-6
    assert abs(me.params.lam - q.params.lam) < 2 * me.se[3]
    assert np.all(np.linalg.eigvalsh(me.vcov) > 0)


def test_identification_diagnostics_vanish_at_truth(small_design):
    W, M, X = small_design
    data = simulate(W, M, X, [1, 1, 1], 0.3, 0.2, seed=4)
    p0 = ParamVector([1, 1, 1], 0.3, 0.2)
    out = identification_diagnostics(data, p0, np.ones(80), [(0.3, 0.2), (1.0, -0.5)])
    assert np.abs(out[0, 2:]).max() < 1e-8
    assert np.abs(out[1, 2:]).max() > 1e-3
