"""
Heteroskedasticity-robust M-estimation from adjusted scores.

The lam-score uses Wd(rho) = R W R^{-1} - Diag(R W R^{-1}) with R = e^{rho M}.
Its diagonal comes from the commutator series

    diag(R W R^{-1}) = sum_k rho^k / k! diag(ad_M^k W),   ad_M C = MC - CM,

precomputed once per (W, M) pair, so score evaluation needs only
matrix-vector actions.
"""

from __future__ import annotations

import functools
import math

import numpy as np
import scipy.optimize

from . import expm as ex
from ._lq import dense, lq_cov, sandwich, sym
from .model_core import C_BOUND, FitResult, MessData, ParamVector, residuals
from .weights import validate

ROOT_TOL = 1e-6


class MEFit(FitResult):
    """FitResult with info keys score_norm, newton_iterations, fallback."""


class _CommutatorDiag:
    """Table of diag(ad_M^k W) / k! for k = 0..q."""

    def __init__(self, W, M, c_bound: float = C_BOUND, tol: float = 1e-14):
        Wc, Mc = ex._as_csr(W), ex._as_csr(M)
        norm_m = validate(M).row_sum_norm if hasattr(M, "csr") else ex._inf_norm(Mc)
        q = ex.series_order(2 * c_bound * max(norm_m, 1e-12), tol, q_cap=120)
        C = Wc.toarray()
        Mt = Mc.T.tocsr()
        rows = [np.diag(C).copy()]
        for k in range(1, q + 1):
            # C M computed as (M' C')'
            C = (Mc @ C - (Mt @ C.T).T) / k
            rows.append(np.diag(C).copy())
        self.q = q
        self.table = np.array(rows).T  # n x (q+1)

    def __call__(self, rho: float, d: int = 0) -> np.ndarray:
        return self.table @ ex._power_table(rho, d, self.q)


@functools.lru_cache(maxsize=8)
def _commutator_diag(W, M, c_bound: float) -> _CommutatorDiag:
    return _CommutatorDiag(W, M, c_bound)


class WdOperator:
    """Wd(rho) as a linear operator, with its diagonal and rho-derivative."""

    def __init__(self, W, M, rho: float, c_bound: float = C_BOUND):
        self.W, self.M, self.rho = W, M, float(rho)
        self._W = ex._as_csr(W)
        self._M = ex._as_csr(M)
        self._Mt = self._M.T.tocsr()
        self._Wt = self._W.T.tocsr()
        cd = _commutator_diag(W, M, float(c_bound))
        self.full_diag = cd(self.rho)
        self.full_diag_deriv = cd(self.rho, 1)
        self.n = self._W.shape[0]

    def wbb(self, x):
        """e^{rho M} W e^{-rho M} x."""
        y = ex.expm_action(self._M, -self.rho, x)
        return ex.expm_action(self._M, self.rho, self._W @ y)

    def wbb_t(self, x):
        y = ex.expm_action(self._Mt, self.rho, x)
        return ex.expm_action(self._Mt, -self.rho, self._Wt @ y)

    def _scale(self, d, x):
        return d * x if np.ndim(x) == 1 else d[:, None] * x

    def apply(self, x):
        return self.wbb(x) - self._scale(self.full_diag, x)

    def apply_t(self, x):
        return self.wbb_t(x) - self._scale(self.full_diag, x)

    def deriv_apply(self, x):
        """d Wd / d rho applied to x: (M Wbb - Wbb M) x minus its diagonal part."""
        return (
            self._M @ self.wbb(x)
            - self.wbb(self._M @ x)
            - self._scale(self.full_diag_deriv, x)
        )

    def dense(self) -> np.ndarray:
        if self.n > ex.DENSE_LIMIT:
            raise ValueError(f"dense Wd refused for n={self.n} > {ex.DENSE_LIMIT}")
        R = ex.expm_dense_via_action(self._M, self.rho)
        Rinv = ex.expm_dense_via_action(self._M, -self.rho)
        Wbb = R @ (self._W @ Rinv)
        np.fill_diagonal(Wbb, 0.0)
        return Wbb


def wd_matrix(W, M, rho: float, c_bound: float = C_BOUND) -> WdOperator:
    return WdOperator(W, M, rho, c_bound)


def _pieces(data: MessData, lam: float, rho: float):
    SY = ex.expm_action(data.W, lam, data.Y)
    RX = ex.expm_action(data.M, rho, data.X)
    Z = ex.expm_action(data.M, rho, SY)
    return SY, RX, Z


def beta_m(data: MessData, zeta) -> np.ndarray:
    """Least squares of e^{rho M} e^{lam W} Y on e^{rho M} X."""
    _, RX, Z = _pieces(data, *zeta)
    return np.linalg.lstsq(RX, Z, rcond=None)[0]


def adjusted_score(data: MessData, p: ParamVector, c_bound: float = C_BOUND) -> np.ndarray:
    """Adjusted score in (beta, lam, rho)."""
    SY, RX, Z = _pieces(data, p.lam, p.rho)
    V = Z - RX @ p.beta
    wd = WdOperator(data.W, data.M, p.rho, c_bound)
    return np.concatenate([RX.T @ V, [-Z @ wd.apply(V), -V @ (data.M @ V)]])


def concentrated_score(data: MessData, zeta, c_bound: float = C_BOUND) -> np.ndarray:
    lam, rho = float(zeta[0]), float(zeta[1])
    _, RX, Z = _pieces(data, lam, rho)
    beta = np.linalg.lstsq(RX, Z, rcond=None)[0]
    V = Z - RX @ beta
    wd = WdOperator(data.W, data.M, rho, c_bound)
    return np.array([-Z @ wd.apply(V), -V @ (data.M @ V)])


def psi_matrix(data: MessData, p: ParamVector, c_bound: float = C_BOUND) -> np.ndarray:
    """Observed -(1/n) d S* / d gamma', ordered (beta, lam, rho)."""
    n, k = data.n, data.k
    SY, RX, Z = _pieces(data, p.lam, p.rho)
    V = Z - RX @ p.beta
    Ydot = ex.expm_action(data.M, p.rho, data.W @ SY)
    Md = ex._as_csr(data.M)
    MsV = Md @ V + Md.T @ V
    wd = WdOperator(data.W, data.M, p.rho, c_bound)
    WdV = wd.apply(V)
    WdtZ = wd.apply_t(Z)
    P = np.zeros((k + 2, k + 2))
    P[:k, :k] = RX.T @ RX
    P[:k, k] = -RX.T @ Ydot
    P[:k, k + 1] = -RX.T @ MsV
    P[k, :k] = -WdtZ @ RX
    P[k, k] = Ydot @ WdV + WdtZ @ Ydot
    P[k, k + 1] = (Md @ Z) @ WdV + Z @ wd.deriv_apply(V) + WdtZ @ (Md @ V)
    P[k + 1, :k] = P[:k, k + 1]
    P[k + 1, k] = Ydot @ MsV
    P[k + 1, k + 1] = (Md @ V) @ MsV
    return P / n


def _score_forms(data: MessData, p: ParamVector, Wd: np.ndarray, RX: np.ndarray):
    k = data.k
    forms = [(RX[:, m], None) for m in range(k)]
    forms.append((-Wd.T @ (RX @ p.beta), -Wd))
    forms.append((None, -dense(data.M)))
    return forms


def omega_matrix(data: MessData, p: ParamVector, var, c_bound: float = C_BOUND) -> np.ndarray:
    """Var(S*(gamma) / sqrt(n)) for independent disturbances with variances ``var``."""
    Wd = WdOperator(data.W, data.M, p.rho, c_bound).dense()
    RX = ex.expm_action(data.M, p.rho, data.X)
    return lq_cov(_score_forms(data, p, Wd, RX), var) / data.n


def _jacobian(data, zeta, c_bound):
    """d S^c / d zeta' from the Psi blocks (beta partialled out)."""
    k = data.k
    b = beta_m(data, zeta)
    P = psi_matrix(data, ParamVector(b, zeta[0], zeta[1]), c_bound)
    Pbb, Pbz, Pzb, Pzz = P[:k, :k], P[:k, k:], P[k:, :k], P[k:, k:]
    return -data.n * (Pzz - Pzb @ np.linalg.solve(Pbb, Pbz))


def fit_m(
    data: MessData,
    start=None,
    c_bound: float = C_BOUND,
    max_iter: int = 50,
    max_halvings: int = 20,
    vcov: bool = True,
) -> MEFit:
    """Solve the concentrated adjusted score for (lam, rho) by damped Newton.

    ``start`` defaults to the QMLE (lam, rho).  If Newton stalls, the
    squared score norm is minimized by a simplex from the best point.
    """
    data.check_rank()
    if start is None:
        from .qmle import fit_qmle

        q = fit_qmle(data, c_bound, vcov=None)
        start = (q.params.lam, q.params.rho)
    z = np.clip(np.asarray(start, dtype=float), -c_bound, c_bound)
    S = lambda v: concentrated_score(data, v, c_bound)
    s = S(z)
    norm = lambda v: float(np.max(np.abs(v)))
    it = 0
    for it in range(1, max_iter + 1):
        if norm(s) < ROOT_TOL:
            break
        try:
            step = -np.linalg.solve(_jacobian(data, z, c_bound), s)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        for _ in range(max_halvings):
            cand = np.clip(z + t * step, -c_bound, c_bound)
            sc = S(cand)
            if norm(sc) < norm(s):
                break
            t *= 0.5
        else:
            break
        z, s = cand, sc
    fallback = False
    if norm(s) >= ROOT_TOL:
        fallback = True
        res = scipy.optimize.minimize(
            lambda v: float(np.sum(S(v) ** 2)), z, method="Nelder-Mead",
            bounds=[(-c_bound, c_bound)] * 2,
            options=dict(xatol=1e-12, fatol=1e-20, maxfev=2000),
        )
        if norm(S(res.x)) < norm(s):
            z, s = res.x, S(res.x)
    lam, rho = float(z[0]), float(z[1])
    beta = beta_m(data, z)
    p = ParamVector(beta, lam, rho)
    V = residuals(data, p)
    converged = norm(s) < ROOT_TOL
    fit = MEFit(
        method="me",
        params=p,
        residuals=V,
        objective=float(s @ s),
        converged=converged,
        iterations=it,
        flags=[] if converged else ["no_root"],
        info=dict(score_norm=norm(s), fallback=fallback),
    )
    if vcov:
        fit.vcov = vcov_m(fit, data, c_bound)
    return fit


def vcov_m(fit: FitResult, data: MessData, c_bound: float = C_BOUND) -> np.ndarray:
    Psi = psi_matrix(data, fit.params, c_bound)
    Om = omega_matrix(data, fit.params, fit.residuals**2, c_bound)
    return sandwich(Psi, Om, data.n)


def identification_diagnostics(
    data: MessData, p0: ParamVector, var, grid, c_bound: float = C_BOUND
) -> np.ndarray:
    """The two scaled population quantities at each (lam, rho) in ``grid``.

    Row layout: lam, rho, value for the Wd condition, value for the M
    condition.  Both vanish at the truth; a grid point where both vanish
    signals weak identification there.
    """
    n = data.n
    var = np.broadcast_to(np.asarray(var, dtype=float), (n,))
    Md = dense(data.M)
    mean0 = ex.expm_action(data.W, -p0.lam, data.X @ p0.beta)   # E(Y)
    G0inv = ex.expm_dense_via_action(data.W, -p0.lam) @ ex.expm_dense_via_action(data.M, -p0.rho)
    out = []
    for lam, rho in grid:
        R = ex.expm_dense_via_action(data.M, rho)
        G = R @ ex.expm_dense_via_action(data.W, lam)
        RX = R @ data.X
        Q = np.eye(n) - RX @ np.linalg.solve(RX.T @ RX, RX.T)
        m = Q @ (G @ mean0)
        Wd = WdOperator(data.W, data.M, rho, c_bound).dense()
        H = G @ G0inv
        HS = H * var[None, :]
        vals = []
        for P in (Wd, Md):
            vals.append((m @ P @ m + np.sum(HS * (P @ H))) / n)
        out.append([lam, rho, *vals])
    return np.array(out)
