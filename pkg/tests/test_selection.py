import math

import numpy as np
import pytest
import scipy.stats
from numpy.testing import assert_allclose

from messpy import expm as ex
from messpy.bayes import Priors, gibbs_hetero, gibbs_homo
from messpy.model_core import MessData, make_design, rng_for, simulate
from messpy.qmle import fit_qmle
from messpy.selection import (STAT_NAMES, cp_weight_criterion, default_instruments, fit_sarar,
                              info_criteria, jtest_mess_null, jtest_sarar_null, mallows_cp,
                              marginal_likelihood_mhm, sddr, sddr_grid, vuong_test)
from messpy.weights import build_knn

from conftest import knn_pair


@pytest.fixture(scope="module")
def sar_setup():
    n = 100
    rng = np.random.default_rng(1)
    W = build_knn(rng.uniform(size=(n, 2)), 5)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
    v = rng_for(1, 0).standard_normal(n)
    Y = np.linalg.solve(np.eye(n) - 0.4 * W.dense(), X @ np.ones(3) + v)
    return Y, X, W


def test_jtest_structure(sar_setup):
    Y, X, W = sar_setup
    r = jtest_sarar_null(Y, X, W, B_boot=9, seed=3)
    assert set(r.statistics) == set(STAT_NAMES)
    assert all(s >= 0 for s in r.statistics.values())
    assert all(0 <= p <= 1 for p in r.pvalues_bootstrap.values())
    assert r.boot.shape == (9, len(STAT_NAMES))
    again = jtest_sarar_null(Y, X, W, B_boot=9, seed=3)
    assert again.pvalues_bootstrap == r.pvalues_bootstrap


def test_jtest_rank_deficient_instruments(sar_setup):
    Y, X, W = sar_setup
    F = default_instruments(X, W)
    with pytest.raises(ValueError):
        jtest_mess_null(Y, X, W, B_boot=0, F=np.column_stack([F, F[:, 0]]))


def test_sarar_loglik_matches_dense():
    W, M = knn_pair(60, seed=2)
    X = np.column_stack([np.ones(60), make_design(60, 2)])
    rng = np.random.default_rng(4)
    Y = rng.standard_normal(60) + X @ [1, 1, 1]
    f = fit_sarar(Y, X, W, M)
    n = 60
    A = np.eye(n) - f.alpha * W.dense()
    B = np.eye(n) - f.tau * M.dense()
    V = B @ (A @ Y - X @ f.beta)
    ll = (-0.5 * n * math.log(2 * math.pi * f.sigma2) - V @ V / (2 * f.sigma2)
          + np.linalg.slogdet(A)[1] + np.linalg.slogdet(B)[1])
    assert f.loglik == pytest.approx(ll, rel=1e-9)


def test_vuong_direction():
    W, M = knn_pair(300, seed=3)
    X = np.column_stack([np.ones(300), make_design(300, 3)])
    mess = simulate(W, M, X, [1, 1, 1], -2.0, -1.0, seed=4)
    assert vuong_test(mess).statistic < 0
    v = rng_for(5, 0).standard_normal(300)
    u = np.linalg.solve(np.eye(300) - 0.8 * M.dense(), v)
    Y = np.linalg.solve(np.eye(300) - 0.9 * W.dense(), X @ np.ones(3) + u)
    assert vuong_test(MessData(Y, X, W, M)).statistic > 0


def test_info_criteria_guards(small_data):
    fit = fit_qmle(small_data)
    with pytest.raises(ValueError):
        info_criteria(small_data, fit=fit, variant="conditional")
    with pytest.raises(ValueError):
        info_criteria(small_data, fit=fit, variant="integrated")
    with pytest.raises(ValueError):
        info_criteria(small_data)
    a = info_criteria(small_data, fit=fit)
    b = info_criteria(small_data, fit=fit, bic="standard")
    assert a.bic - b.bic == pytest.approx(a.n_params * math.log(small_data.n))
    assert a.aic == b.aic


def test_cp_duplicates_and_vertices(small_data):
    d = small_data
    other = knn_pair(80, seed=9)[0]
    cands = [(d.W, d.M), (d.W, d.M), (other, d.M)]
    r = mallows_cp(d.Y, d.X, cands)
    assert r.values[0] == pytest.approx(r.values[1], rel=1e-10)
    for s in range(3):
        e = np.eye(3)[s]
        assert cp_weight_criterion(r, d.Y, e) == pytest.approx(r.values[s], rel=1e-10)
    assert r.weights.sum() == pytest.approx(1.0) and np.all(r.weights >= 0)
    assert cp_weight_criterion(r, d.Y, r.weights) <= r.values.min() + 1e-8
    with pytest.raises(ValueError):
        mallows_cp(d.Y, d.X, [])


def test_sddr_grid_and_guards(small_data):
    g = sddr_grid(101, 2.0, seed=1)
    assert 0.0 in g and np.all(np.abs(g) < 2.0) and np.all(np.diff(g) > 0)
    ch = gibbs_homo(small_data, n_draws=300, burn=100, seed=1)
    pr = Priors.default(3)
    with pytest.raises(ValueError):
        sddr(ch, small_data, pr, grid=[0.1, 0.2])
    with pytest.raises(ValueError):
        sddr(ch, small_data, pr, param="beta1")
    fixed = gibbs_homo(small_data, n_draws=300, burn=100, seed=1, fixed={"lam": 0.0})
    with pytest.raises(ValueError):
        sddr(fixed, small_data, pr)


def test_sddr_flat_likelihood_gives_unit_factor(small_data):
    # zero response with zero beta: the kernel in lam is the prior alone
    d = small_data.with_y(np.zeros(small_data.n))
    pr = Priors(np.zeros(3), np.eye(3), V_lam=0.2)
    ch = gibbs_homo(d, pr, n_draws=300, burn=100, seed=2, fixed={"beta": np.zeros(3)})
    assert sddr(ch, d, pr, m=4001).log_bf == pytest.approx(0.0, abs=1e-3)


def test_mhm_shift_invariance(small_data):
    ch = gibbs_homo(small_data, n_draws=800, burn=200, seed=3)
    lk = np.random.default_rng(0).standard_normal(len(ch.draws))
    a = marginal_likelihood_mhm(ch, log_kernels=lk)[0]
    b = marginal_likelihood_mhm(ch, log_kernels=lk + 5.0)[0]
    assert b - a == pytest.approx(5.0, abs=1e-10)
    with pytest.raises(ValueError):
        marginal_likelihood_mhm(ch)


def test_mhm_conjugate_evidence(small_data):
    d = small_data.with_y(small_data.Y - ex.expm_action(small_data.W, -0.4, 0 * small_data.Y))
    pr = Priors(np.zeros(3), 4 * np.eye(3))
    ch = gibbs_homo(d, pr, n_draws=4000, burn=500, seed=4,
                    fixed={"lam": 0.0, "rho": 0.0, "sigma2": 1.0})
    got = marginal_likelihood_mhm(ch, d, pr)[0]
    C = np.eye(d.n) + d.X @ pr.V_beta @ d.X.T
    exact = scipy.stats.multivariate_normal(np.zeros(d.n), C).logpdf(d.Y)
    assert got == pytest.approx(exact, abs=0.1)


def test_integrated_criteria_need_hetero_chain(small_data):
    ch = gibbs_hetero(small_data, n_draws=400, burn=100, seed=5, store_eta=False)
    r = info_criteria(small_data, chain=ch)
    assert r.variant == "integrated" and r.dic is not None and np.isfinite(r.p_D)
