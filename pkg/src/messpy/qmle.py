"""Quasi-maximum likelihood estimation and its sandwich covariances."""

from __future__ import annotations

import numpy as np
import scipy.optimize

from . import expm as ex
from ._lq import lq_cov, sandwich, sym, tr_prod
from ._profile import Profile, dense_pieces
from .model_core import C_BOUND, FitResult, MessData, ParamVector, residuals, sample_moments
from .weights import WeightsMatrix

SCORE_TOL = 1e-6


class QmleFit(FitResult):
    """FitResult with info keys sigma2, mu3, mu4, score_norm, vcov_kind."""


def score_q(data: MessData, p: ParamVector) -> np.ndarray:
    """Gradient of Q = V'V in (beta, lam, rho)."""
    SY = ex.expm_action(data.W, p.lam, data.Y)
    V = ex.expm_action(data.M, p.rho, SY - data.X @ p.beta)
    RX = ex.expm_action(data.M, p.rho, data.X)
    Ydot = ex.expm_action(data.M, p.rho, data.W @ SY)
    return np.concatenate([-2 * RX.T @ V, [2 * V @ Ydot, 2 * V @ (data.M @ V)]])


def _nm(f, x0, c, xatol, fatol, maxfev):
    return scipy.optimize.minimize(
        f, x0, method="Nelder-Mead", bounds=[(-c, c), (-c, c)],
        options=dict(xatol=xatol, fatol=fatol, maxfev=maxfev, adaptive=False),
    )


def _newton_polish(prof: Profile, z: np.ndarray, c: float, max_iter: int = 20):
    """Newton steps on the concentrated objective; finite-difference Hessian."""
    grad = lambda v: prof.grad_Qc(*v)
    q = prof.Qc(*z)
    it = 0
    for it in range(1, max_iter + 1):
        g = grad(z)
        if np.max(np.abs(g)) < 0.1 * SCORE_TOL:
            break
        H = np.zeros((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = 1e-5
            H[:, j] = (grad(z + e) - grad(z - e)) / 2e-5
        H = 0.5 * (H + H.T)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        for _ in range(20):
            cand = np.clip(z + t * step, -c, c)
            qc = prof.Qc(*cand)
            if qc <= q + 1e-12 * (1 + abs(q)):
                break
            t *= 0.5
        else:
            break
        z, q = cand, qc
    return z, it


def fit_qmle(
    data: MessData,
    c_bound: float = C_BOUND,
    vcov: str | None = "homo",
    q: int | None = None,
    profile: Profile | None = None,
) -> QmleFit:
    """Minimize V'V over (beta, lam, rho) with beta concentrated out.

    The (lam, rho) search runs a loose simplex from a 3 x 3 grid of starts,
    tightens the best one and finishes with Newton steps.  ``vcov`` selects
    "homo", "hetero" or None.
    """
    data.check_rank()
    prof = profile or Profile(data, c_bound, q)
    f = lambda z: prof.Qc(z[0], z[1])
    h = c_bound / 2
    starts = [np.array([a, b]) for a in (-h, 0.0, h) for b in (-h, 0.0, h)]
    runs = [_nm(f, s, c_bound, 1e-3, 1e-6, 300) for s in starts]
    best = min(runs, key=lambda r: r.fun)
    fine = _nm(f, best.x, c_bound, 1e-8, 1e-10 * (1 + abs(best.fun)), 2000)
    z, n_newton = _newton_polish(prof, fine.x, c_bound)
    lam, rho = float(z[0]), float(z[1])
    beta = prof.beta(lam, rho)
    p = ParamVector(beta, lam, rho)
    V = residuals(data, p)
    s2, m3, m4 = sample_moments(V)
    p = ParamVector(beta, lam, rho, s2)
    score = score_q(data, p)
    score_norm = float(np.max(np.abs(score)))
    flags = []
    at_edge = max(abs(lam), abs(rho)) >= c_bound - 1e-8
    if at_edge:
        flags.append("boundary")
    converged = score_norm < SCORE_TOL or at_edge
    if not converged:
        flags.append("score_not_zero")
    fit = QmleFit(
        method="qmle",
        params=p,
        residuals=V,
        objective=float(V @ V),
        converged=converged,
        iterations=int(sum(r.nit for r in runs) + fine.nit + n_newton),
        flags=flags,
        info=dict(sigma2=s2, mu3=m3, mu4=m4, score_norm=score_norm, basis_order=prof.q),
    )
    if vcov == "homo":
        fit.vcov = vcov_homo(fit, data)
    elif vcov == "hetero":
        fit.vcov = vcov_hetero(fit, data)
    elif vcov is not None:
        raise ValueError(f"unknown vcov kind {vcov!r}")
    fit.info["vcov_kind"] = vcov
    return fit


def _score_forms(d, k: int):
    """Linear-quadratic forms of the score at the truth: (a, P) per parameter."""
    forms = [(-2 * d.RX[:, m], None) for m in range(k)]
    forms.append((2 * d.WRXb, 2 * d.Wbb))
    forms.append((None, 2 * d.Md))
    return forms


def _hessian_blocks(d, k: int, Sigma: np.ndarray) -> np.ndarray:
    """E of the Hessian of Q at the truth for diagonal Sigma (given as a vector)."""
    H = np.zeros((k + 2, k + 2))
    H[:k, :k] = 2 * d.RX.T @ d.RX
    H[k, :k] = H[:k, k] = -2 * d.RX.T @ d.WRXb
    SW = Sigma[:, None] * d.Wbb
    SM = Sigma[:, None] * d.Md
    H[k, k] = 2 * d.WRXb @ d.WRXb + 2 * tr_prod(sym(d.Wbb), SW)
    H[k, k + 1] = H[k + 1, k] = 2 * tr_prod(sym(d.Md), SW)
    H[k + 1, k + 1] = 2 * tr_prod(sym(d.Md), SM)
    return H


def ab_matrices(data: MessData, p: ParamVector, sigma2: float, mu3: float, mu4: float):
    """(A, B), each scaled by 1/n, for homoskedastic disturbances."""
    d = dense_pieces(data, p)
    n, k = data.n, data.k
    A = _hessian_blocks(d, k, np.full(n, sigma2)) / n
    B = lq_cov(_score_forms(d, k), sigma2, mu3, mu4) / n
    return A, B


def df_matrices(data: MessData, p: ParamVector, var: np.ndarray):
    """(D, F), each scaled by 1/n, for unit-specific variances ``var``."""
    d = dense_pieces(data, p)
    n, k = data.n, data.k
    var = np.asarray(var, dtype=float)
    D = _hessian_blocks(d, k, var) / n
    F = lq_cov(_score_forms(d, k), var) / n
    return D, F


def vcov_homo(fit: FitResult, data: MessData) -> np.ndarray:
    s2, m3, m4 = sample_moments(fit.residuals)
    A, B = ab_matrices(data, fit.params, s2, m3, m4)
    return sandwich(A, B, data.n)


def vcov_hetero(fit: FitResult, data: MessData) -> np.ndarray:
    D, F = df_matrices(data, fit.params, fit.residuals**2)
    return sandwich(D, F, data.n)


def check_commute(W, M, tol: float = 1e-12) -> tuple[bool, float]:
    """Whether WM = MW, with the row-sum norm of the commutator."""
    Wc = W.csr if isinstance(W, WeightsMatrix) else ex._as_csr(W)
    Mc = M.csr if isinstance(M, WeightsMatrix) else ex._as_csr(M)
    C = (Wc @ Mc - Mc @ Wc).tocsr()
    norm = float(np.asarray(abs(C).sum(axis=1)).max()) if C.nnz else 0.0
    return norm <= tol, norm
