"""
Moments of linear-quadratic forms s = a'V + V'PV in independent
disturbances, plus small dense helpers shared by the estimators.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

Form = tuple  # (a or None, P or None)


def dense(A) -> np.ndarray:
    from .weights import WeightsMatrix

    if isinstance(A, WeightsMatrix):
        return A.dense()
    if sp.issparse(A):
        return A.toarray()
    return np.asarray(A, dtype=float)


def sym(A: np.ndarray) -> np.ndarray:
    """A + A'."""
    return A + A.T


def diag_part(A: np.ndarray) -> np.ndarray:
    return np.diag(np.diag(A))


def center_trace(A: np.ndarray) -> np.ndarray:
    """A - I tr(A)/n."""
    n = A.shape[0]
    return A - np.eye(n) * (np.trace(A) / n)


def tr_prod(A: np.ndarray, B: np.ndarray) -> float:
    """tr(AB) in O(n^2)."""
    return float(np.einsum("ij,ji->", A, B))


def _prep(forms: Sequence[Form], n: int):
    out = []
    for a, P in forms:
        a = np.zeros(n) if a is None else np.asarray(a, dtype=float).ravel()
        P = None if P is None else dense(P)
        out.append((a, P))
    return out


def lq_mean(forms: Sequence[Form], var) -> np.ndarray:
    """E[a'V + V'PV] = tr(Sigma P)."""
    var = np.asarray(var, dtype=float)
    res = []
    for a, P in forms:
        if P is None:
            res.append(0.0)
        else:
            d = np.diag(dense(P))
            res.append(float(np.sum(d * var)) if var.ndim else float(var * d.sum()))
    return np.array(res)


def lq_cov(
    forms: Sequence[Form],
    var,
    mu3=0.0,
    mu4=None,
) -> np.ndarray:
    """Covariance matrix of linear-quadratic forms in independent V.

    ``var`` is a scalar (homoskedastic) or per-unit vector.  ``mu3`` and
    ``mu4`` are the third and fourth moments (scalars or per-unit); when
    ``mu4`` is None the normal value 3 var^2 is used.
    """
    n = None
    for a, P in forms:
        if a is not None:
            n = np.asarray(a).size
            break
        if P is not None:
            n = P.shape[0]
            break
    F = _prep(forms, n)
    s = np.broadcast_to(np.asarray(var, dtype=float), (n,)).copy()
    m3 = np.broadcast_to(np.asarray(mu3, dtype=float), (n,))
    m4 = 3 * s**2 if mu4 is None else np.broadcast_to(np.asarray(mu4, dtype=float), (n,))
    kurt = m4 - 3 * s**2
    diags = [np.zeros(n) if P is None else np.diag(P).copy() for _, P in F]
    # Sigma^{1/2}-free form: tr(S A S B^s) = sum_ij s_i A_ij s_j (B_ji + B_ij)
    SPS = [None if P is None else (s[:, None] * P * s[None, :]) for _, P in F]
    m = len(F)
    C = np.zeros((m, m))
    for j in range(m):
        aj, Pj = F[j]
        for l in range(j, m):
            al, Pl = F[l]
            v = float(np.sum(aj * s * al))
            v += float(np.sum(m3 * (aj * diags[l] + al * diags[j])))
            v += float(np.sum(kurt * diags[j] * diags[l]))
            if Pj is not None and Pl is not None:
                v += float(np.sum(SPS[j] * (Pl + Pl.T).T))
            C[j, l] = C[l, j] = v
    return C


def independent_columns(F: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Linearly independent columns of F, kept in their original order."""
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    if F.shape[1] == 0:
        return F
    norms = np.linalg.norm(F, axis=0)
    keep_nz = norms > 0
    G = F[:, keep_nz] / norms[keep_nz]
    _, R, piv = scipy.linalg.qr(G, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > tol * d[0])) if d.size else 0
    cols = np.flatnonzero(keep_nz)[np.sort(piv[:rank])]
    return F[:, cols]


def safe_inv(A: np.ndarray, ridge_rel: float = 1e-10) -> tuple[np.ndarray, bool]:
    """Inverse of a symmetric matrix; ridge eps = ridge_rel * trace/n if singular."""
    A = 0.5 * (A + A.T)
    try:
        c = np.linalg.cond(A)
        if np.isfinite(c) and c < 1e14:
            return np.linalg.inv(A), False
    except np.linalg.LinAlgError:
        pass
    eps = ridge_rel * np.trace(A) / A.shape[0]
    if not eps > 0:
        eps = ridge_rel
    return np.linalg.inv(A + eps * np.eye(A.shape[0])), True


def sandwich(A: np.ndarray, B: np.ndarray, n: int) -> np.ndarray:
    Ai = np.linalg.inv(A)
    V = Ai @ B @ Ai.T / n
    return 0.5 * (V + V.T)


def fd_jacobian(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(f(x))
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        hi = h * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = hi
        J[:, i] = (np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2 * hi)
    return J
