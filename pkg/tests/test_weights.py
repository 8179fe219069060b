import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose, assert_array_equal

from messpy.weights import (GridSpec, WeightsMatrix, build_grid_contiguity, build_knn, from_dense,
                            grid_coordinates, neighbor_counts, read_mtx, row_normalize, validate,
                            write_mtx)


@pytest.mark.parametrize("spec,n,ne", [((5, 15), 486, 361), ((14, 20), 485, 121), ((2, 4), 21, 9)])
def test_grid_sizes(spec, n, ne):
    coords, mask = grid_coordinates(GridSpec(*spec))
    assert coords.shape == (n, 2)
    assert mask.sum() == ne


def test_grid_spec_guard():
    with pytest.raises(ValueError):
        GridSpec(5, 5)


def test_grid_contiguity_symmetric_and_normalized():
    W0 = build_grid_contiguity(GridSpec(5, 15), normalize=False)
    A = W0.csr
    assert abs(A - A.T).max() == 0
    W = build_grid_contiguity(GridSpec(5, 15))
    rep = validate(W)
    assert rep.max_abs_diag == 0.0 and rep.diag_ok
    assert_allclose(np.asarray(W.csr.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    assert rep.row_sum_norm == pytest.approx(1.0, abs=1e-12)
    assert np.isfinite(rep.col_sum_norm) and rep.col_sum_norm >= 1.0


def test_knn_two_points():
    W = build_knn([[0, 0], [1, 0]], 1)
    assert_array_equal(W.dense(), [[0, 1], [1, 0]])


def test_knn_collinear_ties_go_to_lower_index():
    W = build_knn([[0, 0], [1, 0], [2, 0]], 1, normalize=False)
    D = W.dense()
    assert D[0, 1] == 1 and D[2, 1] == 1
    assert D[1, 0] == 1 and D[1, 2] == 0  # middle point: tie broken towards unit 0


def test_knn_grid_five_ones_per_row():
    coords = grid_coordinates(GridSpec(5, 15))[0]
    W = build_knn(coords, 5, normalize=False)
    assert_array_equal(neighbor_counts(W), 5)
    assert set(np.unique(W.csr.data)) == {1.0}
    assert W == build_knn(coords, 5, normalize=False)


def test_knn_guards():
    with pytest.raises(ValueError):
        build_knn([[0, 0], [1, 1]], 2)


def test_row_normalize_examples():
    W = row_normalize(from_dense([[0, 2, 2], [0, 0, 0], [1, 0, 0]]))
    assert_allclose(W.dense(), [[0, 0.5, 0.5], [0, 0, 0], [1, 0, 0]])
    W2 = row_normalize(from_dense([[0, 1], [1, 0]]))
    assert_allclose(W2.dense(), [[0, 1], [1, 0]])


def test_validate_zero_matrix():
    rep = validate(WeightsMatrix(sp.csr_matrix((4, 4))))
    assert rep == (0.0, 0.0, 0.0, True)


def test_from_dense_rejects_diagonal():
    with pytest.raises(ValueError):
        from_dense(np.eye(3))


def test_mtx_roundtrip(tmp_path):
    W = build_knn(np.random.default_rng(0).uniform(size=(30, 2)), 4)
    write_mtx(W, tmp_path / "W.mtx")
    W2 = read_mtx(tmp_path / "W.mtx")
    assert W2 == W
