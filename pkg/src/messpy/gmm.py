"""GMM with linear and quadratic moments: initial, optimal, best and robust variants."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import expm as ex
from ._lq import center_trace, dense, independent_columns, lq_cov, safe_inv, sym
from ._profile import Profile
from .model_core import C_BOUND, FitResult, MessData, ParamVector, residuals, sample_moments


class MomentError(ValueError):
    """A moment set violates the requirement of its mode."""


@dataclass
class MomentSet:
    """Quadratic matrices P_m and instruments F.

    With ``diag_zero_required`` every P_m must have a zero diagonal
    (valid under unknown heteroskedasticity); otherwise each P_m must be
    trace-zero.
    """

    P_list: list
    F: np.ndarray
    diag_zero_required: bool = False
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.P_list = [dense(P) for P in self.P_list]
        F = np.asarray(self.F, dtype=float)
        self.F = F[:, None] if F.ndim == 1 else F
        self.validate()

    @property
    def kp(self) -> int:
        return len(self.P_list)

    @property
    def kf(self) -> int:
        return self.F.shape[1]

    def validate(self, tol: float = 1e-10) -> None:
        for m, P in enumerate(self.P_list):
            scale = max(np.abs(P).max(), 1.0)
            if self.diag_zero_required:
                if np.abs(np.diag(P)).max() > tol * scale:
                    raise MomentError(f"P[{m}] has a nonzero diagonal")
            elif abs(np.trace(P)) > tol * scale * P.shape[0]:
                raise MomentError(f"P[{m}] is not trace-zero")
        if self.kf and np.linalg.matrix_rank(self.F) < self.kf:
            raise MomentError("instrument matrix F is rank deficient")

    def describe(self) -> dict:
        return dict(kp=self.kp, kf=self.kf, names=list(self.names),
                    mode="hetero" if self.diag_zero_required else "homo")


class GmmFit(FitResult):
    """FitResult with info keys weighting, moments, ridge_flag, j_stat."""


def eval_moments(data: MessData, p: ParamVector, ms: MomentSet) -> np.ndarray:
    V = residuals(data, p)
    return _moments_of(V, ms) / data.n


def _moments_of(V, ms):
    quad = [V @ (P @ V) for P in ms.P_list]
    return np.concatenate([quad, ms.F.T @ V])


class _Objective:
    """g(gamma) and its Jacobian evaluated through the precomputed bases."""

    def __init__(self, data: MessData, ms: MomentSet, prof: Profile):
        self.data, self.ms, self.prof = data, ms, prof
        self.Ps = np.array([sym(P) for P in ms.P_list]) if ms.kp else np.zeros((0, data.n, data.n))
        self.k = data.k

    def _v(self, g):
        beta, lam, rho = g[: self.k], g[self.k], g[self.k + 1]
        RX = self.prof.RX(rho)
        return self.prof.Z(lam, rho) - RX @ beta, RX, beta, lam, rho

    def g(self, g):
        V = self._v(g)[0]
        return _moments_of(V, self.ms) / self.data.n

    def jac(self, g):
        V, RX, beta, lam, rho = self._v(g)
        dV = np.column_stack([
            -RX,
            self.prof.Z(lam, rho, dlam=1),
            self.prof.Z(lam, rho, drho=1) - self.prof.RX(rho, drho=1) @ beta,
        ])
        rows = [(Ps @ V) @ dV for Ps in self.Ps]
        J = np.vstack(rows + [self.ms.F.T @ dV]) if rows else self.ms.F.T @ dV
        return J / self.data.n


def _weight_root(Phi: np.ndarray) -> np.ndarray:
    """L' with Phi = L L' for symmetric PSD Phi."""
    e, U = np.linalg.eigh(0.5 * (Phi + Phi.T))
    e = np.clip(e, 0.0, None)
    return (U * np.sqrt(e)).T


def _minimize(obj: _Objective, Phi: np.ndarray, start: np.ndarray, c_bound: float):
    Lt = _weight_root(Phi)
    k = obj.k
    lo = np.r_[np.full(k, -np.inf), -c_bound, -c_bound]
    hi = np.r_[np.full(k, np.inf), c_bound, c_bound]
    x0 = np.clip(start, lo + 1e-12, hi - 1e-12)
    res = scipy.optimize.least_squares(
        lambda g: Lt @ obj.g(g), x0, jac=lambda g: Lt @ obj.jac(g),
        bounds=(lo, hi), method="trf", xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=500,
        x_scale="jac",
    )
    return res


def _plugins(data, p, ms, V):
    if ms.diag_zero_required:
        return dict(var=V**2)
    s2, m3, m4 = sample_moments(V)
    return dict(var=s2, mu3=m3, mu4=m4)


def h_matrix(ms: MomentSet, var, mu3=0.0, mu4=None) -> np.ndarray:
    """n E[g g'] at the truth; ``var`` scalar (homoskedastic) or per-unit."""
    n = ms.F.shape[0]
    forms = [(None, P) for P in ms.P_list] + [(ms.F[:, j], None) for j in range(ms.kf)]
    if ms.diag_zero_required:
        mu3, mu4 = 0.0, None
    return lq_cov(forms, var, mu3, mu4) / n


def g_matrix(data: MessData, ms: MomentSet, p: ParamVector, var) -> np.ndarray:
    """E[d g / d gamma'] at the truth, columns ordered (beta, lam, rho)."""
    n, k = data.n, data.k
    var = np.broadcast_to(np.asarray(var, dtype=float), (n,))
    R = ex.expm_dense_via_action(data.M, p.rho)
    Rinv = ex.expm_dense_via_action(data.M, -p.rho)
    Wbb = R @ (dense(data.W) @ Rinv)
    Md = dense(data.M)
    RX = R @ data.X
    WRXb = Wbb @ (RX @ p.beta)
    G = np.zeros((ms.kp + ms.kf, k + 2))
    for m, P in enumerate(ms.P_list):
        Ps = sym(P)
        G[m, k] = np.sum(Ps * (Wbb * var[None, :]).T)
        G[m, k + 1] = np.sum(Ps * (Md * var[None, :]).T)
    G[ms.kp:, :k] = -ms.F.T @ RX
    G[ms.kp:, k] = ms.F.T @ WRXb
    return G / n


def _gmm_vcov(G, H, Phi, n, optimal):
    if optimal:
        Hi, _ = safe_inv(H)
        V = np.linalg.inv(G.T @ Hi @ G) / n
    else:
        B = np.linalg.inv(G.T @ Phi @ G)
        V = B @ G.T @ Phi @ H @ Phi @ G @ B / n
    return 0.5 * (V + V.T)


def _finish(data, ms, res, obj, Phi, method, optimal, flags, info, vcov):
    p = ParamVector.from_array(res.x)
    V = residuals(data, p)
    g = obj.g(res.x)
    fit = GmmFit(
        method=method,
        params=ParamVector(p.beta, p.lam, p.rho, float(V @ V) / data.n),
        residuals=V,
        objective=float(g @ Phi @ g),
        converged=bool(res.success),
        iterations=int(res.nfev),
        flags=list(flags) + ([] if res.success else ["no_convergence"]),
        info=dict(moments=ms.describe(), **info),
    )
    if vcov:
        plug = _plugins(data, p, ms, V)
        H = h_matrix(ms, **plug)
        G = g_matrix(data, ms, p, plug["var"])
        fit.vcov = _gmm_vcov(G, H, Phi, data.n, optimal)
    return fit


def default_moment_set(data: MessData) -> MomentSet:
    """P = {W, M} and F = independent columns of [X, WX, W^2X, MX]."""
    WX = data.W @ data.X
    F = independent_columns(np.column_stack([data.X, WX, data.W @ WX, data.M @ data.X]))
    return MomentSet([data.W.dense(), data.M.dense()], F, diag_zero_required=True,
                     names=["W", "M", "F:[X,WX,W2X,MX]"])


def fit_igmme(
    data: MessData,
    ms: MomentSet | None = None,
    Phi: np.ndarray | None = None,
    start=None,
    c_bound: float = C_BOUND,
    vcov: bool = True,
    profile: Profile | None = None,
) -> GmmFit:
    """Minimize g' Phi g over (beta, lam, rho) from the QMLE (or ``start``)."""
    data.check_rank()
    ms = ms or default_moment_set(data)
    m = ms.kp + ms.kf
    Phi = np.eye(m) if Phi is None else np.asarray(Phi, dtype=float)
    if np.linalg.matrix_rank(Phi) < data.k + 2:
        raise ValueError("weighting matrix rank below the parameter count")
    prof = profile or Profile(data, c_bound)
    if start is None:
        from .qmle import fit_qmle

        start = fit_qmle(data, c_bound, vcov=None, profile=prof).params.as_array()
    obj = _Objective(data, ms, prof)
    res = _minimize(obj, Phi, np.asarray(start, dtype=float), c_bound)
    return _finish(data, ms, res, obj, Phi, "igmme", False, [], dict(weighting="given"), vcov)


def fit_optimal(
    data: MessData,
    ms: MomentSet,
    initial: FitResult,
    c_bound: float = C_BOUND,
    vcov: bool = True,
    profile: Profile | None = None,
    method: str = "ogmme",
) -> GmmFit:
    """Minimize g' H^-1 g with H plugged in at the initial estimates."""
    plug = _plugins(data, initial.params, ms, initial.residuals)
    H = h_matrix(ms, **plug)
    Phi, ridge = safe_inv(H)
    prof = profile or Profile(data, c_bound)
    obj = _Objective(data, ms, prof)
    res = _minimize(obj, Phi, initial.params.as_array(), c_bound)
    flags = ["ridge_H"] if ridge else []
    fit = _finish(data, ms, res, obj, Phi, method, True, flags,
                  dict(weighting="optimal", ridge_flag=ridge), vcov)
    fit.info["j_stat"] = data.n * fit.objective
    fit.info["j_df"] = ms.kp + ms.kf - data.k - 2
    return fit


def _intercept_cols(X: np.ndarray) -> np.ndarray:
    return np.flatnonzero(np.ptp(X, axis=0) == 0)


def best_moment_set(data: MessData, initial: FitResult) -> MomentSet:
    """The efficiency-optimal homoskedastic moments evaluated at the initial estimates."""
    p = initial.params
    n = data.n
    R = ex.expm_dense_via_action(data.M, p.rho)
    Rinv = ex.expm_dense_via_action(data.M, -p.rho)
    Wbb = R @ (dense(data.W) @ Rinv)
    X = data.X
    if data.M.row_normalized:
        X = np.delete(X, _intercept_cols(X), axis=1)
    RXs = R @ X
    RWXb = R @ (data.W @ (data.X @ p.beta))
    dW = np.diag(Wbb)
    P = [Wbb, np.diag(dW), center_trace(np.diag(RWXb)), dense(data.M)]
    P += [center_trace(np.diag(RXs[:, m])) for m in range(RXs.shape[1])]
    names = ["Wbb", "Diag(Wbb)", "Diag(RWXb)^t", "M"] + [f"Diag(RX{m + 1})^t" for m in range(RXs.shape[1])]
    F = independent_columns(np.column_stack([RXs, RWXb, np.ones(n), dW]))
    return MomentSet(P, F, diag_zero_required=False, names=names + ["F:[RX*,RWXb,l,diag(Wbb)]"])


def robust_moment_set(data: MessData, initial: FitResult) -> MomentSet:
    """Zero-diagonal moments valid under unknown heteroskedasticity."""
    p = initial.params
    R = ex.expm_dense_via_action(data.M, p.rho)
    Rinv = ex.expm_dense_via_action(data.M, -p.rho)
    Wbb = R @ (dense(data.W) @ Rinv)
    RX = R @ data.X
    F = independent_columns(np.column_stack([Wbb @ (RX @ p.beta), RX]))
    Wd = Wbb - np.diag(np.diag(Wbb))
    return MomentSet([Wd, dense(data.M)], F, diag_zero_required=True,
                     names=["Wbb-Diag(Wbb)", "M", "F:[Wbb RXb, RX]"])


def fit_bgmme(data: MessData, initial: FitResult | None = None, c_bound: float = C_BOUND,
              profile: Profile | None = None) -> GmmFit:
    """Best GMM with the QMLE (default) as the initial estimate."""
    prof = profile or Profile(data, c_bound)
    if initial is None:
        from .qmle import fit_qmle

        initial = fit_qmle(data, c_bound, vcov=None, profile=prof)
    ms = best_moment_set(data, initial)
    return fit_optimal(data, ms, initial, c_bound, profile=prof, method="bgmme")


def fit_rgmme(data: MessData, initial: FitResult | None = None, c_bound: float = C_BOUND,
              profile: Profile | None = None) -> GmmFit:
    """Robust GMM with the default-moment IGMME (default) as the initial estimate."""
    prof = profile or Profile(data, c_bound)
    if initial is None:
        initial = fit_igmme(data, c_bound=c_bound, vcov=False, profile=prof)
    ms = robust_moment_set(data, initial)
    return fit_optimal(data, ms, initial, c_bound, profile=prof, method="rgmme")
