import numpy as np
import pytest
from numpy.testing import assert_allclose

from messpy._lq import fd_jacobian
from messpy._profile import Profile
from messpy.gmm import (MomentError, MomentSet, _Objective, best_moment_set, default_moment_set,
                        eval_moments, fit_bgmme, fit_igmme, fit_optimal, fit_rgmme, g_matrix, h_matrix,
                        robust_moment_set)
from messpy.model_core import DisturbanceScheme, ParamVector, residuals, simulate
from messpy.qmle import fit_qmle


def test_zero_residuals_give_zero_moments(small_design):
    W, M, X = small_design
    data = simulate(W, M, X, [1, 1, 1], 0.3, 0.2, DisturbanceScheme(scale=0.0))
    g = eval_moments(data, ParamVector([1, 1, 1], 0.3, 0.2), default_moment_set(data))
    assert np.abs(g).max() < 1e-12


def test_hand_example():
    from messpy.model_core import MessData
    from messpy.weights import from_dense

    W = from_dense(np.zeros((3, 3)))
    P = np.array([[0, 1, 0], [0, 0, 2], [1, 0, 0.0]])
    F = np.array([[1.0], [2.0], [3.0]])
    data = MessData(np.array([1.0, -1.0, 2.0]), np.ones((3, 1)), W, W)
    ms = MomentSet([P], F, diag_zero_required=True)
    g = eval_moments(data, ParamVector([0.0], 0, 0), ms)
    # V = (1, -1, 2): V'PV = 1*(-1) + (-1)*2*2 + 2*1 = -3; F'V = 1 - 2 + 6 = 5
    assert_allclose(g, np.array([-3.0, 5.0]) / 3)


def test_zero_diagonal_quadratic_moment_mean_zero():
    rng = np.random.default_rng(0)
    n = 10
    P = rng.standard_normal((n, n))
    np.fill_diagonal(P, 0)
    sd = np.sqrt(rng.uniform(0.5, 3, n))
    V = rng.standard_normal((100_000, n)) * sd
    q = np.einsum("ri,ij,rj->r", V, P, V)
    assert abs(q.mean()) < 3 * q.std() / np.sqrt(len(q))


def test_moment_set_validation(small_data):
    P = np.eye(80)
    with pytest.raises(MomentError):
        MomentSet([P], np.ones((80, 1)), diag_zero_required=True)
    with pytest.raises(MomentError):
        MomentSet([P], np.ones((80, 1)), diag_zero_required=False)
    with pytest.raises(MomentError):
        MomentSet([], np.ones((80, 2)))
    W = small_data.W.dense()
    MomentSet([W - np.diag(np.diag(W))], small_data.X, diag_zero_required=True)


def test_robust_set_has_zero_diagonals(small_data):
    q = fit_qmle(small_data, vcov=None)
    for P in robust_moment_set(small_data, q).P_list:
        assert np.all(np.diag(P) == 0)


def test_best_set_trace_zero_and_drops_intercept(small_data):
    q = fit_qmle(small_data, vcov=None)
    ms = best_moment_set(small_data, q)
    for P in ms.P_list:
        assert abs(np.trace(P)) < 1e-8 * max(1, np.abs(P).max()) * 80 or not ms.diag_zero_required
    # M row-normalized with an intercept column: the intercept leaves Diag(RX)
    assert sum(nm.startswith("Diag(RX") for nm in ms.names) == 2


def test_igmme_scale_invariance_and_minimization(small_data):
    ms = default_moment_set(small_data)
    m = ms.kp + ms.kf
    a = fit_igmme(small_data, ms, np.eye(m), vcov=False)
    b = fit_igmme(small_data, ms, 2 * np.eye(m), vcov=False)
    assert_allclose(a.params.as_array(), b.params.as_array(), atol=1e-6)
    g0 = eval_moments(small_data, ParamVector([0.5, 1, 1], 0.4, 0.3), ms)
    assert a.objective <= g0 @ g0 + 1e-12


def test_objective_jacobian_matches_fd(small_data):
    ms = default_moment_set(small_data)
    obj = _Objective(small_data, ms, Profile(small_data))
    g = np.array([0.4, 0.9, 1.1, 0.2, -0.3])
    assert_allclose(obj.jac(g), fd_jacobian(obj.g, g, 1e-6), rtol=1e-5, atol=1e-7)


def test_h_matrix_against_simulation(small_design):
    W, M, X = small_design
    p0 = ParamVector([0.5, 1, 1], 0.4, 0.3)
    base = simulate(W, M, X, p0.beta, p0.lam, p0.rho, seed=0)
    ms = default_moment_set(base)
    draws = []
    for r in range(2000):
        d = simulate(W, M, X, p0.beta, p0.lam, p0.rho, DisturbanceScheme("std_chisq3"), seed=11, rep=r)
        draws.append(eval_moments(d, p0, ms) * d.n)
    S = np.cov(np.array(draws).T) / 80
    H = h_matrix(ms, 1.0, 2 * np.sqrt(2 / 3), 3 + 12 / 3)
    assert np.linalg.norm(S - H) / np.linalg.norm(H) <= 0.05


def test_g_matrix_against_fd_of_expected_moments(small_design):
    W, M, X = small_design
    p0 = ParamVector([0.5, 1, 1], 0.4, 0.3)
    base = simulate(W, M, X, p0.beta, p0.lam, p0.rho, seed=0)
    ms = default_moment_set(base)
    panel = [simulate(W, M, X, p0.beta, p0.lam, p0.rho, seed=12, rep=r) for r in range(400)]

    def mean_g(g):
        p = ParamVector.from_array(g)
        return np.mean([eval_moments(d, p, ms) for d in panel], axis=0)

    fd = fd_jacobian(mean_g, p0.as_array(), 1e-5)
    G = g_matrix(base, ms, p0, 1.0)
    assert np.linalg.norm(fd - G) / np.linalg.norm(G) < 0.1


def test_optimal_beats_identity_weighting(small_data):
    from messpy.gmm import _gmm_vcov

    ig = fit_igmme(small_data)
    ms = default_moment_set(small_data)
    var = ig.residuals ** 2
    H, G = h_matrix(ms, var), g_matrix(small_data, ms, ig.params, var)
    m = ms.kp + ms.kf
    diff = _gmm_vcov(G, H, np.eye(m), 80, False) - _gmm_vcov(G, H, None, 80, True)
    assert np.linalg.eigvalsh(diff).min() > -1e-10
    opt = fit_optimal(small_data, ms, ig)
    Phi = np.linalg.inv(h_matrix(ms, var))
    same = fit_igmme(small_data, ms, Phi, start=ig.params.as_array(), vcov=False)
    assert_allclose(same.params.as_array(), opt.params.as_array(), atol=1e-6)


def test_bgmme_and_rgmme_agree_on_homoskedastic_data(small_data):
    b, r = fit_bgmme(small_data), fit_rgmme(small_data)
    assert b.converged and r.converged
    assert abs(b.params.lam - r.params.lam) < 3 * b.se[3]
    assert b.info["j_df"] == b.info["moments"]["kp"] + b.info["moments"]["kf"] - 5


def test_moment_mean_zero_at_truth_hetero(small_design):
    W, M, X = small_design
    p0 = ParamVector([0.5, 1, 1], 0.4, 0.3)
    scheme = DisturbanceScheme("hetero_exp_x2", params={"column": 2})
    base = simulate(W, M, X, p0.beta, p0.lam, p0.rho, seed=0)
    ms = default_moment_set(base)
    G = np.array([eval_moments(simulate(W, M, X, p0.beta, p0.lam, p0.rho, scheme, seed=13, rep=r), p0, ms)
                  for r in range(500)])
    z = G.mean(0) / (G.std(0, ddof=1) / np.sqrt(500))
    assert np.abs(z).max() < 3.5
