"""
Spatial weights matrices: grid contiguity, k-nearest neighbours,
row normalisation, diagnostics and Matrix Market I/O.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class WeightsMatrix:
    """Immutable sparse n x n weights matrix with a zero diagonal.

    Entries are stored in canonical CSR form (sorted indices, duplicates
    summed) so two matrices with the same triplets compare equal.
    """

    csr: sp.csr_matrix
    row_normalized: bool = False
    coords: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        m = sp.csr_matrix(self.csr, dtype=float, copy=True)
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"weights matrix must be square, got {m.shape}")
        object.__setattr__(self, "csr", m)

    @property
    def n(self) -> int:
        return self.csr.shape[0]

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    def triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        coo = self.csr.tocoo()
        return coo.row.copy(), coo.col.copy(), coo.data.copy()

    def dense(self) -> np.ndarray:
        return self.csr.toarray()

    def __matmul__(self, other):
        return self.csr @ other

    def __eq__(self, other):
        if not isinstance(other, WeightsMatrix):
            return NotImplemented
        if self.n != other.n or self.row_normalized != other.row_normalized:
            return False
        a, b = self.csr, other.csr
        return (
            np.array_equal(a.indptr, b.indptr)
            and np.array_equal(a.indices, b.indices)
            and np.array_equal(a.data, b.data)
        )

    def __hash__(self):
        return hash((self.n, self.nnz, self.row_normalized, self.csr.data.tobytes()))


@dataclass(frozen=True)
class GridSpec:
    c_low: int
    c_high: int

    def __post_init__(self):
        if not (1 <= self.c_low < self.c_high):
            raise ValueError(
                f"grid requires 1 <= c_low < c_high, got ({self.c_low}, {self.c_high})"
            )


class NormsReport(NamedTuple):
    row_sum_norm: float
    col_sum_norm: float
    max_abs_diag: float
    diag_ok: bool


def from_dense(A, row_normalized: bool = False) -> WeightsMatrix:
    A = np.asarray(A, dtype=float)
    if np.any(np.diag(A) != 0):
        raise ValueError("weights matrix must have a zero diagonal")
    return WeightsMatrix(sp.csr_matrix(A), row_normalized=row_normalized)


def grid_coordinates(spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Unit coordinates for the quadrant grid and a boolean NE-quadrant mask.

    Units are ordered lexicographically by (x, y).
    """
    lo, hi = spec.c_low, spec.c_high
    n_half = 2 * (hi - lo - 1) + 1
    half = (lo + 1) + 0.5 * np.arange(n_half)
    ne = [(x, y) for x in half for y in half]
    ints = set()
    for x in range(1, lo + 1):
        for y in range(1, hi + 1):
            ints.add((float(x), float(y)))
    for x in range(1, hi + 1):
        for y in range(1, lo + 1):
            ints.add((float(x), float(y)))
    pts = [(x, y, True) for x, y in ne] + [(x, y, False) for x, y in ints]
    pts.sort(key=lambda p: (p[0], p[1]))
    coords = np.array([(p[0], p[1]) for p in pts], dtype=float)
    mask = np.array([p[2] for p in pts], dtype=bool)
    return coords, mask


def contiguity_binary(coords: np.ndarray, radius: float = 1.0) -> sp.csr_matrix:
    """Binary matrix with w_ij = 1 iff i != j and distance <= radius."""
    tree = cKDTree(coords)
    # tiny slack so exact unit distances are not lost to rounding
    pairs = tree.query_pairs(radius * (1 + 1e-12), output_type="ndarray")
    n = coords.shape[0]
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    data = np.ones(rows.shape[0])
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def build_grid_contiguity(spec: GridSpec, normalize: bool = True) -> WeightsMatrix:
    """Quadrant grid contiguity weights (distance <= 1), row-normalised by default."""
    coords, _ = grid_coordinates(spec)
    W = WeightsMatrix(contiguity_binary(coords), coords=coords)
    return row_normalize(W) if normalize else W


def build_knn(coords, k: int, normalize: bool = True) -> WeightsMatrix:
    """k-nearest-neighbour weights; distance ties go to the lower unit index."""
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2:
        raise ValueError("coords must be an (n, d) array")
    n = coords.shape[0]
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < n, got k={k}, n={n}")
    tree = cKDTree(coords)
    extra = min(n, k + 1 + 8)
    rows, cols = [], []
    while True:
        dist, idx = tree.query(coords, k=extra)
        dist = np.atleast_2d(dist)
        idx = np.atleast_2d(idx)
        # the kth neighbour's distance must be strictly below the last one
        # queried so that every tied candidate has been seen
        ok = True
        for i in range(n):
            keep = idx[i] != i
            d, j = dist[i][keep], idx[i][keep]
            order = np.lexsort((j, d))
            d, j = d[order], j[order]
            if extra < n and d.shape[0] > k and d[k - 1] >= dist[i][-1]:
                ok = False
                break
            rows.append(np.full(k, i))
            cols.append(j[:k])
        if ok:
            break
        rows, cols = [], []
        extra = min(n, 2 * extra)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    A = sp.csr_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(n, n))
    W = WeightsMatrix(A, coords=coords)
    return row_normalize(W) if normalize else W


def row_normalize(W: WeightsMatrix) -> WeightsMatrix:
    """Divide each nonzero row by its sum; zero rows are left alone."""
    A = W.csr
    rs = np.asarray(A.sum(axis=1)).ravel()
    scale = np.ones_like(rs)
    nz = rs != 0
    scale[nz] = 1.0 / rs[nz]
    return WeightsMatrix(sp.diags(scale) @ A, row_normalized=True, coords=W.coords)


def validate(W: WeightsMatrix) -> NormsReport:
    A = W.csr
    absA = abs(A)
    rows = np.asarray(absA.sum(axis=1)).ravel()
    cols = np.asarray(absA.sum(axis=0)).ravel()
    diag = np.abs(A.diagonal())
    max_diag = float(diag.max()) if diag.size else 0.0
    return NormsReport(
        float(rows.max()) if rows.size else 0.0,
        float(cols.max()) if cols.size else 0.0,
        max_diag,
        max_diag == 0.0,
    )


def neighbor_counts(W: WeightsMatrix) -> np.ndarray:
    """Number of nonzero entries per row."""
    return np.diff(W.csr.indptr).astype(float)


def write_mtx(W: WeightsMatrix, path) -> None:
    comment = "row_normalized=1" if W.row_normalized else "row_normalized=0"
    scipy.io.mmwrite(str(path), W.csr, comment=comment, precision=17)


def read_mtx(path) -> WeightsMatrix:
    path = Path(path)
    A = scipy.io.mmread(str(path))
    flag = False
    with open(path if path.suffix else path.with_suffix(".mtx")) as fh:
        for line in fh:
            if not line.startswith("%"):
                break
            if "row_normalized=1" in line:
                flag = True
    return WeightsMatrix(sp.csr_matrix(A), row_normalized=flag)


def read_coords(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_coords(coords: Iterable, path) -> None:
    np.savetxt(path, np.asarray(coords, dtype=float), delimiter=",", fmt="%.17g")
