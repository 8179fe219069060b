"""
Actions of matrix exponentials on vectors via truncated Taylor series,
precomputed matrix-vector bases for e^{rho M} e^{lam W} Y and e^{rho M} X,
and a dense scaling-and-squaring oracle.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

if os.environ.get("MESSPY_PURE_PYTHON"):
    from . import _kernels_py as _k

    BACKEND = "python"
else:
    try:
        from . import _kernels as _k

        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _kernels_py as _k

        BACKEND = "python"

DENSE_LIMIT = 2000
# above this value of |a| * ||A||_inf the series is applied in sub-steps
_STEP_NORM = 2.0


@dataclass(frozen=True)
class TruncationPolicy:
    q_max: int = 30
    tol: float = 1e-12

    def __post_init__(self):
        if self.q_max < 1:
            raise ValueError("q_max must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


DEFAULT_POLICY = TruncationPolicy()


def _as_csr(A) -> sp.csr_matrix:
    from .weights import WeightsMatrix

    if isinstance(A, WeightsMatrix):
        A = A.csr
    elif not sp.issparse(A):
        A = sp.csr_matrix(np.asarray(A, dtype=float))
    A = sp.csr_matrix(A, dtype=np.float64)
    A.sort_indices()
    if A.indptr.dtype != np.int32:
        A = sp.csr_matrix(
            (A.data, A.indices.astype(np.int32), A.indptr.astype(np.int32)), shape=A.shape
        )
    return A


def _inf_norm(A: sp.csr_matrix) -> float:
    if A.nnz == 0:
        return 0.0
    return float(np.asarray(abs(A).sum(axis=1)).max())


def expm_action(A, a: float, V, policy: TruncationPolicy = DEFAULT_POLICY, return_order=False):
    """e^{aA} V by a truncated Taylor series.

    The series stops at the first order whose term has max-abs below
    ``policy.tol`` (capped at ``policy.q_max``).  When |a| * ||A||_inf
    exceeds 2 the action is split into equal sub-steps so each series
    converges well inside the cap.
    """
    A = _as_csr(A)
    V = np.asarray(V, dtype=np.float64)
    vec = V.ndim == 1
    V2 = np.ascontiguousarray(V.reshape(V.shape[0], -1))
    if V2.shape[0] != A.shape[1]:
        raise ValueError(f"dimension mismatch: A is {A.shape}, V has {V.shape[0]} rows")
    a = float(a)
    steps = max(1, math.ceil(abs(a) * _inf_norm(A) / _STEP_NORM))
    out = V2
    q_used = 0
    for _ in range(steps):
        out, q = _k.taylor_action(
            A.indptr, A.indices, A.data, a / steps, np.ascontiguousarray(out), policy.tol, policy.q_max
        )
        q_used = max(q_used, q)
    out = out.ravel() if vec else out
    return (out, q_used) if return_order else out


def expm_dense_via_action(A, a: float, policy: TruncationPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Dense e^{aA} from the series applied to the identity."""
    A = _as_csr(A)
    n = A.shape[0]
    if n > DENSE_LIMIT:
        raise ValueError(f"dense exponential refused for n={n} > {DENSE_LIMIT}")
    return expm_action(A, a, np.eye(n), policy)


def dense_expm(A) -> np.ndarray:
    """Scaling-and-squaring Pade exponential of a small dense matrix."""
    if sp.issparse(A):
        A = A.toarray()
    else:
        from .weights import WeightsMatrix

        if isinstance(A, WeightsMatrix):
            A = A.dense()
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("dense_expm needs a square matrix")
    if A.shape[0] > DENSE_LIMIT:
        raise ValueError(f"dense exponential refused for n={A.shape[0]} > {DENSE_LIMIT}")
    return scipy.linalg.expm(A)


def series_order(c: float, tol: float = 1e-13, q_cap: int = 60) -> int:
    """Smallest q with e^c c^{q+1}/(q+1)! < tol (truncation bound for norm <= c)."""
    c = abs(float(c))
    term = 1.0
    for q in range(q_cap):
        term *= c / (q + 1)
        if math.exp(c) * term < tol:
            return max(q, 1)
    return q_cap


@dataclass(frozen=True)
class ExpBasis:
    """Precomputed products for the pair action and the regressor action.

    ``Y1``/``Y2``/``Y3`` hold the columns M^i W^j Y grouped as
      Y1: i = 1..q, j = 0..i-1
      Y2: j = 1..q, i = 0..j-1  (the W power is the larger one)
      Y3: i = j = 0..q
    ``idx1``/``idx2``/``idx3`` give the (i, j) = (M power, W power) of each
    column, ``D1``/``D2``/``D3`` the factorial scalings 1/(i! j!).
    ``XX`` is n x k x (q+1) with XX[:, m, i] = M^i X_m and ``D4`` = 1/i!.
    """

    q: int
    Y1: np.ndarray
    Y2: np.ndarray
    Y3: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    D3: np.ndarray
    idx1: np.ndarray
    idx2: np.ndarray
    idx3: np.ndarray
    XX: np.ndarray | None
    D4: np.ndarray

    @property
    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """(n x (q+1)^2 scaled columns, (q+1)^2 x 2 exponent table)."""
        cached = self.__dict__.get("_stacked")
        if cached is None:
            B = np.hstack([self.Y1 * self.D1, self.Y2 * self.D2, self.Y3 * self.D3])
            E = np.vstack([self.idx1, self.idx2, self.idx3])
            cached = (np.ascontiguousarray(B), E)
            object.__setattr__(self, "_stacked", cached)
        return cached


def _index_sets(q: int):
    idx1 = [(i, j) for i in range(1, q + 1) for j in range(i)]
    idx2 = [(j, i) for i in range(1, q + 1) for j in range(i)]
    idx3 = [(i, i) for i in range(q + 1)]
    as_arr = lambda L: np.array(L, dtype=int).reshape(-1, 2)
    return as_arr(idx1), as_arr(idx2), as_arr(idx3)


def _inv_fact(k: np.ndarray) -> np.ndarray:
    return np.array([1.0 / math.factorial(int(v)) for v in k])


def precompute_bases(W, M, Y, X=None, q: int = 20) -> ExpBasis:
    """Build the stacked products M^i W^j Y (i, j <= q) and M^i X."""
    if q < 0:
        raise ValueError("q must be >= 0")
    Wc, Mc = _as_csr(W), _as_csr(M)
    Y = np.ascontiguousarray(np.asarray(Y, dtype=float).reshape(-1, 1))
    n = Y.shape[0]
    if Wc.shape[0] != n or Mc.shape[0] != n:
        raise ValueError("dimension mismatch between weights and Y")
    WY = _k.power_stack(Wc.indptr, Wc.indices, Wc.data, Y, q)[:, :, 0].T.copy()  # n x (q+1)
    MWY = _k.power_stack(Mc.indptr, Mc.indices, Mc.data, np.ascontiguousarray(WY), q)
    # MWY[i][:, j] = M^i W^j Y
    idx1, idx2, idx3 = _index_sets(q)
    take = lambda idx: (
        np.column_stack([MWY[i][:, j] for i, j in idx]) if len(idx) else np.zeros((n, 0))
    )
    Y1, Y2, Y3 = take(idx1), take(idx2), take(idx3)
    scal = lambda idx: _inv_fact(idx[:, 0]) * _inv_fact(idx[:, 1]) if len(idx) else np.zeros(0)
    XX = None
    if X is not None:
        X = np.ascontiguousarray(np.asarray(X, dtype=float).reshape(n, -1))
        MX = _k.power_stack(Mc.indptr, Mc.indices, Mc.data, X, q)  # (q+1, n, k)
        XX = np.ascontiguousarray(np.transpose(MX, (1, 2, 0)))
    return ExpBasis(
        q=q,
        Y1=Y1,
        Y2=Y2,
        Y3=Y3,
        D1=scal(idx1),
        D2=scal(idx2),
        D3=scal(idx3),
        idx1=idx1,
        idx2=idx2,
        idx3=idx3,
        XX=XX,
        D4=_inv_fact(np.arange(q + 1)),
    )


def _power_table(x: float, d: int, q: int) -> np.ndarray:
    """d-th derivative of x^i for i = 0..q."""
    i = np.arange(q + 1)
    c = np.ones(q + 1)
    for s in range(d):
        c = c * (i - s)
    return c * float(x) ** np.clip(i - d, 0, None).astype(float)


def _monomials(E: np.ndarray, lam: float, rho: float, dlam: int, drho: int) -> np.ndarray:
    """Coefficients of d^{dlam}/dlam d^{drho}/drho of rho^i lam^j."""
    if len(E) == 0:
        return np.zeros(0)
    q = int(E.max())
    return _power_table(rho, drho, q)[E[:, 0]] * _power_table(lam, dlam, q)[E[:, 1]]


def pair_action(basis: ExpBasis, lam: float, rho: float, dlam: int = 0, drho: int = 0) -> np.ndarray:
    """Truncated e^{rho M} e^{lam W} Y (or its partial derivatives) from the bases."""
    B, E = basis.stacked
    return B @ _monomials(E, lam, rho, dlam, drho)


def kappa(basis: ExpBasis, lam: float, rho: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three monomial vectors paired with Y1, Y2, Y3."""
    return tuple(_monomials(E, lam, rho, 0, 0) for E in (basis.idx1, basis.idx2, basis.idx3))


def x_action(basis: ExpBasis, rho: float, drho: int = 0) -> np.ndarray:
    """Truncated e^{rho M} X (or d^{drho}/drho of it) from the bases."""
    if basis.XX is None:
        raise ValueError("basis was built without X")
    coef = _power_table(rho, drho, basis.q) * basis.D4
    return basis.XX @ coef
