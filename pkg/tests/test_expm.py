import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp
from numpy.testing import assert_allclose

from messpy import _kernels_py
from messpy import expm as ex
from messpy.weights import build_knn, from_dense


def rand_sparse(n, seed, density=0.2):
    rng = np.random.default_rng(seed)
    A = sp.random(n, n, density=density, random_state=rng).toarray()
    np.fill_diagonal(A, 0.0)
    return A / max(np.abs(A).sum(axis=1).max(), 1e-12)


def test_zero_scalar_is_identity():
    A = rand_sparse(10, 0)
    V = np.arange(10.0)
    assert_allclose(ex.expm_action(A, 0.0, V), V, rtol=0, atol=0)


def test_action_matches_dense_oracle():
    A = rand_sparse(20, 1)
    V = np.random.default_rng(2).standard_normal((20, 3))
    got = ex.expm_action(A, 0.7, V, ex.TruncationPolicy(q_max=60, tol=1e-14))
    want = scipy.linalg.expm(0.7 * A) @ V
    assert np.max(np.abs(got - want)) <= 1e-10 * np.max(np.abs(want))


def test_inverse_roundtrip():
    A = rand_sparse(50, 3)
    V = np.random.default_rng(4).standard_normal(50)
    back = ex.expm_action(A, 1.3, ex.expm_action(A, -1.3, V))
    assert_allclose(back, V, rtol=1e-10, atol=1e-12)


def test_dense_expm_examples():
    assert_allclose(ex.dense_expm(np.zeros((3, 3))), np.eye(3))
    d = np.array([0.1, -0.5, 2.0])
    assert_allclose(ex.dense_expm(np.diag(d)), np.diag(np.exp(d)), rtol=1e-14)
    N = np.array([[0.0, 3.0], [0.0, 0.0]])
    assert_allclose(ex.dense_expm(N), np.eye(2) + N, rtol=0, atol=1e-15)


def test_determinant_is_exp_trace():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((30, 30)) * 0.1
    sign, logdet = np.linalg.slogdet(ex.dense_expm(1.5 * A))
    assert sign > 0 and logdet == pytest.approx(1.5 * np.trace(A), abs=1e-8)


def test_large_norm_uses_substeps():
    A = rand_sparse(15, 6) * 3.0
    V = np.ones(15)
    got, q = ex.expm_action(A, 2.0, V, return_order=True)
    assert q <= ex.DEFAULT_POLICY.q_max
    assert_allclose(got, scipy.linalg.expm(2.0 * A) @ V, rtol=1e-10)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        ex.expm_action(np.zeros((3, 3)), 1.0, np.ones(4))


def test_python_fallback_matches_compiled():
    A = ex._as_csr(rand_sparse(40, 7))
    V = np.ascontiguousarray(np.random.default_rng(8).standard_normal((40, 2)))
    out_py, q_py = _kernels_py.taylor_action(A.indptr, A.indices, A.data, -0.9, V, 1e-13, 40)
    out, q = ex._k.taylor_action(A.indptr, A.indices, A.data, -0.9, V, 1e-13, 40)
    assert q == q_py
    assert_allclose(out, out_py, rtol=1e-13, atol=1e-15)
    P_py = _kernels_py.power_stack(A.indptr, A.indices, A.data, V, 5)
    P = ex._k.power_stack(A.indptr, A.indices, A.data, V, 5)
    assert_allclose(P, P_py, rtol=1e-13, atol=1e-15)


def test_series_order_bound():
    q = ex.series_order(2.0, 1e-13)
    assert np.exp(2.0) * 2.0 ** (q + 1) / np.prod(np.arange(1, q + 2, dtype=float)) < 1e-13


class TestBases:
    def setup_method(self):
        rng = np.random.default_rng(9)
        coords = rng.uniform(size=(20, 2))
        self.W, self.M = build_knn(coords, 3), build_knn(coords, 5)
        self.Y = rng.standard_normal(20)
        self.X = rng.standard_normal((20, 2))

    def test_q_zero(self):
        b = ex.precompute_bases(self.W, self.M, self.Y, self.X, q=0)
        assert b.Y1.shape[1] == 0 and b.Y2.shape[1] == 0
        assert_allclose(b.Y3[:, 0], self.Y)
        assert_allclose(b.XX[:, :, 0], self.X)

    def test_column_counts_and_products(self):
        q = 2
        b = ex.precompute_bases(self.W, self.M, self.Y, self.X, q=q)
        assert b.Y1.shape[1] == q * (q + 1) // 2
        Wd, Md = self.W.dense(), self.M.dense()
        for cols, idx in ((b.Y1, b.idx1), (b.Y2, b.idx2), (b.Y3, b.idx3)):
            for c, (i, j) in enumerate(idx):
                want = np.linalg.matrix_power(Md, i) @ np.linalg.matrix_power(Wd, j) @ self.Y
                assert_allclose(cols[:, c], want, rtol=1e-12, atol=1e-14)

    def test_origin_returns_y(self):
        b = ex.precompute_bases(self.W, self.M, self.Y, q=20)
        assert_allclose(ex.pair_action(b, 0.0, 0.0), self.Y, rtol=0, atol=0)

    @pytest.mark.parametrize("lam,rho", [(-2, -2), (-2, 1), (0.5, -1), (2, 2), (1.3, 0.0)])
    def test_pair_action_matches_nested(self, lam, rho):
        b = ex.precompute_bases(self.W, self.M, self.Y, q=20)
        want = ex.expm_action(self.M, rho, ex.expm_action(self.W, lam, self.Y))
        assert_allclose(ex.pair_action(b, lam, rho), want, rtol=0, atol=1e-8 * np.abs(want).max())
        dense = scipy.linalg.expm(rho * self.M.dense()) @ scipy.linalg.expm(lam * self.W.dense()) @ self.Y
        assert_allclose(ex.pair_action(b, lam, rho), dense, atol=1e-8 * np.abs(dense).max())

    def test_derivatives_match_fd(self):
        b = ex.precompute_bases(self.W, self.M, self.Y, self.X, q=25)
        h = 1e-6
        d_lam = (ex.pair_action(b, 0.3 + h, -0.4) - ex.pair_action(b, 0.3 - h, -0.4)) / (2 * h)
        assert_allclose(ex.pair_action(b, 0.3, -0.4, dlam=1), d_lam, rtol=1e-6, atol=1e-8)
        d_rho = (ex.x_action(b, -0.4 + h) - ex.x_action(b, -0.4 - h)) / (2 * h)
        assert_allclose(ex.x_action(b, -0.4, drho=1), d_rho, rtol=1e-6, atol=1e-8)


def test_weights_matrix_input():
    W = from_dense([[0, 1.0], [1.0, 0]])
    assert_allclose(ex.expm_action(W, 1.0, np.array([1.0, 0.0])), [np.cosh(1), np.sinh(1)])
