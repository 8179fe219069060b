# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled CSR kernels for truncated exponential series and power stacks."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef void _csr_matmat(const int[::1] indptr, const int[::1] indices,
                      const double[::1] data, const double[:, ::1] X,
                      double[:, ::1] out, double scale) noexcept nogil:
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t m = X.shape[1]
    cdef Py_ssize_t i, p, c, j
    cdef double w
    for i in range(n):
        for c in range(m):
            out[i, c] = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            w = data[p] * scale
            for c in range(m):
                out[i, c] += w * X[j, c]


def taylor_action(const int[::1] indptr, const int[::1] indices,
                  const double[::1] data, double a, double[:, ::1] V,
                  double tol, int qmax):
    """Sum_{i<=q} a^i A^i V / i!, stopping once the last term's max-abs < tol.

    Returns (result, q_used).
    """
    cdef Py_ssize_t n = V.shape[0]
    cdef Py_ssize_t m = V.shape[1]
    out_arr = np.array(V, dtype=np.float64, copy=True, order="C")
    term_arr = np.array(V, dtype=np.float64, copy=True, order="C")
    nxt_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] term = term_arr
    cdef double[:, ::1] nxt = nxt_arr
    cdef double[:, ::1] tmp
    cdef int q = 0
    cdef int i
    cdef Py_ssize_t r, c
    cdef double mx, v
    if a == 0.0:
        return out_arr, 0
    with nogil:
        for i in range(1, qmax + 1):
            _csr_matmat(indptr, indices, data, term, nxt, a / i)
            mx = 0.0
            for r in range(n):
                for c in range(m):
                    v = nxt[r, c]
                    out[r, c] += v
                    if fabs(v) > mx:
                        mx = fabs(v)
            tmp = term
            term = nxt
            nxt = tmp
            q = i
            if mx < tol:
                break
    return out_arr, q


def power_stack(const int[::1] indptr, const int[::1] indices,
                const double[::1] data, double[:, ::1] V, int q):
    """Array of shape (q+1, n, m) holding A^i V for i = 0..q."""
    cdef Py_ssize_t n = V.shape[0]
    cdef Py_ssize_t m = V.shape[1]
    res = np.empty((q + 1, n, m), dtype=np.float64)
    res[0] = V
    cdef double[:, :, ::1] R = res
    cdef int i
    with nogil:
        for i in range(1, q + 1):
            _csr_matmat(indptr, indices, data, R[i - 1], R[i], 1.0)
    return res
