"""Pure numpy/scipy fallback with the same signatures as the compiled kernels."""

import numpy as np
import scipy.sparse as sp


def _csr(indptr, indices, data, n):
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def taylor_action(indptr, indices, data, a, V, tol, qmax):
    V = np.array(V, dtype=np.float64, copy=True, order="C")
    out = V.copy()
    if a == 0.0:
        return out, 0
    A = _csr(indptr, indices, data, V.shape[0])
    term = V
    q = 0
    for i in range(1, qmax + 1):
        term = (a / i) * (A @ term)
        out += term
        q = i
        if np.abs(term).max(initial=0.0) < tol:
            break
    return out, q


def power_stack(indptr, indices, data, V, q):
    V = np.asarray(V, dtype=np.float64)
    A = _csr(indptr, indices, data, V.shape[0])
    res = np.empty((q + 1,) + V.shape)
    res[0] = V
    for i in range(1, q + 1):
        res[i] = A @ res[i - 1]
    return res
