"""
Outcome equation e^{lam W} Y = D beta + V with Durbin and endogenous
regressors: initial 2SLS, feasible nonlinear 2SLS and the adaptive group
LASSO on the Durbin/endogenous coefficient block.

For fixed lam the problem in beta is linear, so every estimator here is a
1-D search over lam with beta (penalized or not) solved exactly inside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import expm as ex
from ._lq import independent_columns, safe_inv
from .model_core import C_BOUND, rng_for
from .weights import WeightsMatrix, build_knn, validate

LAM_GRID = 41


class EndogError(ValueError):
    pass


@dataclass
class EndogModel:
    """Y, exogenous X1 (no intercept), W, endogenous Z and its instruments Zbar.

    D = [X*, Wl, WX1, Z] where X* = [l, X1] unless W is row-normalized, in
    which case X* = X1 and Wl = l serves as the intercept.
    """

    Y: np.ndarray
    X1: np.ndarray
    W: WeightsMatrix
    Z: np.ndarray | None = None
    Zbar: np.ndarray | None = None
    depth: int = 2
    c_bound: float = C_BOUND

    def __post_init__(self):
        n = self.W.n
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1)
        self.X1 = np.asarray(self.X1, dtype=float).reshape(n, -1)
        if self.Z is not None:
            self.Z = np.asarray(self.Z, dtype=float).reshape(n, -1)
        if self.Zbar is not None:
            self.Zbar = np.asarray(self.Zbar, dtype=float).reshape(n, -1)
        if self.Y.size != n:
            raise EndogError("Y length does not match W")
        if self.Z is not None and self.Zbar is None:
            raise EndogError("endogenous Z needs instruments Zbar")
        l = np.ones((n, 1))
        WX1 = self.W @ self.X1
        Wl = self.W @ l
        kz = 0 if self.Z is None else self.Z.shape[1]
        blocks = [self.X1, l, WX1] if self.W.row_normalized else [l, self.X1, Wl, WX1]
        k1 = self.X1.shape[1]
        names = [f"x{j + 1}" for j in range(k1)]
        if self.W.row_normalized:
            names += ["const"] + [f"Wx{j + 1}" for j in range(k1)]
            xi = [False] * (k1 + 1) + [True] * k1
        else:
            names = ["const"] + names + ["Wl"] + [f"Wx{j + 1}" for j in range(k1)]
            xi = [False] * (1 + k1) + [True] * (1 + k1)
        if kz:
            blocks.append(self.Z)
            names += [f"z{j + 1}" for j in range(kz)]
            xi += [True] * kz
        self.D = np.hstack(blocks)
        self.names = names
        self.xi_mask = np.array(xi)
        if np.linalg.matrix_rank(self.D) < self.D.shape[1]:
            raise EndogError("D is rank deficient")
        self.F = build_iv(self.W, self.X1, self.Zbar, self.depth)
        if self.F.shape[1] < self.D.shape[1] + 1:
            raise EndogError("fewer instruments than parameters")
        norm = max(validate(self.W).row_sum_norm, 1e-12)
        self.q = ex.series_order(self.c_bound * norm, 1e-13, q_cap=80)
        # columns W^j Y / j!, so e^{lam W} Y = basis @ lam^j
        cols = [self.Y]
        for j in range(1, self.q + 1):
            cols.append(self.W @ cols[-1] / j)
        self._ybasis = np.column_stack(cols)
        self._FY = self.F.T @ self._ybasis
        self._FD = self.F.T @ self.D

    @property
    def n(self) -> int:
        return self.W.n

    def SY(self, lam: float) -> np.ndarray:
        return self._ybasis @ ex._power_table(lam, 0, self.q)

    def FSY(self, lam: float, d: int = 0) -> np.ndarray:
        return self._FY @ ex._power_table(lam, d, self.q)

    def resid(self, theta) -> np.ndarray:
        return self.SY(theta[0]) - self.D @ theta[1:]


@dataclass
class EndogFit:
    theta: np.ndarray                # (lam, beta)
    names: list
    objective: float
    vcov: np.ndarray | None = None
    xi_zero: bool = False
    alpha: float | None = None
    flags: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def lam(self) -> float:
        return float(self.theta[0])

    @property
    def beta(self) -> np.ndarray:
        return self.theta[1:]

    @property
    def se(self):
        return None if self.vcov is None else np.sqrt(np.clip(np.diag(self.vcov), 0, None))


def build_iv(W: WeightsMatrix, X1, Zbar=None, depth: int = 2) -> np.ndarray:
    """Independent columns of [l, X1, W^j l, W^j X1 (j <= depth), Zbar].

    W^j l is skipped for row-normalized W, where it equals l.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    n = W.n
    X1 = np.asarray(X1, dtype=float).reshape(n, -1)
    l = np.ones((n, 1))
    cols = [l, X1]
    Lp, Xp = l, X1
    for _ in range(depth):
        Lp, Xp = W @ Lp, W @ Xp
        if not W.row_normalized:
            cols.append(Lp)
        cols.append(Xp)
    if Zbar is not None:
        cols.append(np.asarray(Zbar, dtype=float).reshape(n, -1))
    F = independent_columns(np.hstack(cols))
    if np.linalg.matrix_rank(F) < F.shape[1]:
        raise EndogError("instrument matrix is rank deficient")
    return F


class _Problem:
    """Q(theta) = || L'F'(e^{lam W}Y - D beta) ||^2 with Phi = L L'."""

    def __init__(self, model: EndogModel, Phi: np.ndarray):
        self.m = model
        Phi = 0.5 * (Phi + Phi.T)
        self.Lt = np.linalg.cholesky(Phi).T
        self.B = self.Lt @ model._FD
        mask = model.xi_mask
        self.Bd, self.Bx = self.B[:, ~mask], self.B[:, mask]
        Qd, _ = np.linalg.qr(self.Bd)
        self.Qd = Qd
        C = self.Bx - Qd @ (Qd.T @ self.Bx)
        self.C = C
        self.CtC = C.T @ C
        self.evals, self.evecs = np.linalg.eigh(self.CtC)

    def a(self, lam):
        return self.Lt @ self.m.FSY(lam)

    def solve_beta(self, lam: float, tau: float = 0.0):
        """Exact minimizer over beta of Q/n + tau ||xi||."""
        m = self.m
        n = m.n
        a = self.a(lam)
        if tau <= 0:
            beta = np.linalg.lstsq(self.B, a, rcond=None)[0]
        else:
            b = a - self.Qd @ (self.Qd.T @ a)
            g = self.C.T @ b
            kappa = 0.5 * n * tau
            gn = np.linalg.norm(g)
            if gn <= kappa:
                xi = np.zeros(self.Bx.shape[1])
            else:
                c = self.evecs.T @ g
                lam_e = np.clip(self.evals, 0.0, None)
                h = lambda t: math.sqrt(np.sum(c**2 / (lam_e * t + kappa) ** 2)) - 1.0
                hi = 1.0
                while h(hi) > 0:
                    hi *= 2.0
                t = scipy.optimize.brentq(h, 0.0, hi, xtol=1e-14, rtol=1e-14)
                xi = self.evecs @ (c / (lam_e + kappa / t))
            delta = np.linalg.lstsq(self.Bd, a - self.Bx @ xi, rcond=None)[0]
            beta = np.empty(self.B.shape[1])
            beta[~m.xi_mask], beta[m.xi_mask] = delta, xi
        r = a - self.B @ beta
        return beta, float(r @ r)

    def profile(self, lam: float, tau: float = 0.0) -> float:
        beta, q = self.solve_beta(lam, tau)
        return q / self.m.n + tau * float(np.linalg.norm(beta[self.m.xi_mask]))

    def minimize(self, tau: float = 0.0):
        c = self.m.c_bound
        grid = np.linspace(-c, c, LAM_GRID)
        vals = np.array([self.profile(x, tau) for x in grid])
        i = int(np.argmin(vals))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        res = scipy.optimize.minimize_scalar(
            lambda x: self.profile(x, tau), bounds=(lo, hi), method="bounded",
            options=dict(xatol=1e-10),
        )
        lam = float(res.x) if res.fun <= vals[i] else float(grid[i])
        beta, q = self.solve_beta(lam, tau)
        return np.r_[lam, beta], q


def _sigma_weight(model: EndogModel, v: np.ndarray):
    return safe_inv(model.F.T @ (v[:, None] ** 2 * model.F))


def _regular_vcov(model: EndogModel, theta: np.ndarray, cols=None) -> np.ndarray:
    """[(-W D_c beta_c, D_c)'F (F' S F)^{-1} F'(-W D_c beta_c, D_c)]^{-1}, S = Diag(resid^2)."""
    cols = np.ones(model.D.shape[1], bool) if cols is None else cols
    Dc = model.D[:, cols]
    bc = theta[1:][cols]
    v = model.resid(theta)
    G = model.F.T @ np.column_stack([-(model.W @ (Dc @ bc)), Dc])
    Phi, _ = _sigma_weight(model, v)
    return safe_inv(G.T @ Phi @ G)[0]


def fit_2sls_initial(model: EndogModel) -> EndogFit:
    """Minimizer of the 2SLS objective with weight (F'F)^{-1}."""
    Phi, flag = safe_inv(model.F.T @ model.F)
    prob = _Problem(model, Phi)
    theta, q = prob.minimize()
    return EndogFit(theta, ["lambda"] + model.names, q,
                    flags=["ridge"] if flag else [], info=dict(weight="FF"))


def fit_feasible_n2sls(model: EndogModel, initial: EndogFit | None = None,
                       sigma_identity: bool = False) -> EndogFit:
    """Re-minimize with weight (F' Diag(v^2) F)^{-1} built from initial residuals."""
    initial = initial or fit_2sls_initial(model)
    if sigma_identity:
        Phi, flag = safe_inv(model.F.T @ model.F)
    else:
        Phi, flag = _sigma_weight(model, model.resid(initial.theta))
    prob = _Problem(model, Phi)
    theta, q = prob.minimize()
    fit = EndogFit(theta, ["lambda"] + model.names, q,
                   vcov=_regular_vcov(model, theta), flags=["ridge"] if flag else [],
                   info=dict(weight="FSF", Phi=Phi))
    fit.xi_zero = bool(np.all(theta[1:][model.xi_mask] == 0))
    return fit


def fit_aglasso(model: EndogModel, alpha: float, mu: float = 1.0,
                initial: EndogFit | None = None, feasible: EndogFit | None = None) -> EndogFit:
    """Minimize Q/n + alpha ||xi_tilde||^{-mu} ||xi|| with the feasible weight.

    ``initial`` supplies the weight (2SLS residuals) and ``feasible`` the
    adaptive factor; both are fitted when omitted.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    initial = initial or fit_2sls_initial(model)
    feasible = feasible or fit_feasible_n2sls(model, initial)
    Phi = feasible.info["Phi"]
    prob = _Problem(model, Phi)
    xin = float(np.linalg.norm(feasible.beta[model.xi_mask]))
    tau = alpha * xin ** (-mu) if xin > 0 else (np.inf if alpha > 0 else 0.0)
    if np.isinf(tau):
        tau = 1e300
    theta, q = prob.minimize(tau)
    xi_zero = bool(np.all(theta[1:][model.xi_mask] == 0))
    cols = ~model.xi_mask if xi_zero else None
    vcov = _regular_vcov(model, theta, cols)
    return EndogFit(theta, ["lambda"] + model.names, q, vcov=vcov, xi_zero=xi_zero,
                    alpha=alpha, info=dict(tau=tau, Phi=Phi, vcov_cols=cols))


def alpha_max(model: EndogModel, feasible: EndogFit, mu: float = 1.0) -> float:
    """Smallest alpha that zeroes xi at the feasible lam."""
    prob = _Problem(model, feasible.info["Phi"])
    a = prob.a(feasible.lam)
    b = a - prob.Qd @ (prob.Qd.T @ a)
    xin = float(np.linalg.norm(feasible.beta[model.xi_mask]))
    return 2.0 / model.n * float(np.linalg.norm(prob.C.T @ b)) * xin**mu


def default_alpha_grid(model: EndogModel, feasible: EndogFit, mu: float = 1.0, size: int = 20,
                       floor: float = 1e-6):
    return np.geomspace(floor, 1.0, size) * 1.01 * alpha_max(model, feasible, mu)


def select_alpha(model: EndogModel, alpha_grid=None, gamma_n: float | None = None,
                 mu: float = 1.0, initial: EndogFit | None = None,
                 feasible: EndogFit | None = None):
    """Minimize h(alpha) = Q(theta_alpha)/n - 1{xi_alpha = 0} gamma_n over the grid.

    Returns (alpha, fit at alpha, table of (alpha, h, xi_zero)).
    """
    initial = initial or fit_2sls_initial(model)
    feasible = feasible or fit_feasible_n2sls(model, initial)
    if alpha_grid is None:
        alpha_grid = default_alpha_grid(model, feasible, mu)
    alpha_grid = np.asarray(alpha_grid, dtype=float)
    if alpha_grid.size == 0:
        raise ValueError("empty alpha grid")
    gamma_n = model.n ** -0.25 if gamma_n is None else gamma_n
    if gamma_n < 0:
        raise ValueError("gamma_n must be >= 0")
    rows, fits = [], []
    for a in alpha_grid:
        f = fit_aglasso(model, a, mu, initial, feasible)
        h = f.objective / model.n - (gamma_n if f.xi_zero else 0.0)
        rows.append((a, h, f.xi_zero))
        fits.append(f)
    i = int(np.argmin([r[1] for r in rows]))
    return float(alpha_grid[i]), fits[i], np.array(rows, dtype=float)


def simulate_endog(n: int, lam0: float = -1.0, xi0: float = 1.0, seed: int = 0, rep: int = 0,
                   W: WeightsMatrix | None = None, k_nn: int = 6) -> tuple[EndogModel, np.ndarray]:
    """Row-normalized kNN design; returns (model, theta0).

    Z = X1 + 0.5 V + Zbar with Zbar ~ N(0, 1) observed and used as instrument.
    Coefficients: x1 = 1, const = 1, Wx1 = xi0, z = xi0.
    """
    if W is None:
        crng = rng_for(seed, n, 0)
        W = build_knn(crng.uniform(size=(n, 2)), k_nn)
    rng = rng_for(seed, n, rep + 1)
    X1 = rng.standard_normal((n, 1))
    zbar = rng.standard_normal((n, 1))
    V = rng.standard_normal(n)
    Z = X1 + 0.5 * V[:, None] + zbar
    Zbar = np.hstack([zbar, W @ zbar])
    beta0 = np.array([1.0, 1.0, xi0, xi0])
    D = np.hstack([X1, np.ones((n, 1)), W @ X1, Z])
    Y = ex.expm_action(W, -lam0, D @ beta0 + V)
    return EndogModel(Y, X1, W, Z, Zbar), np.r_[lam0, beta0]


def rate_demo(n_grid=(200, 800, 3200), reps: int = 100, seed: int = 0, lam0: float = -1.0,
              xi_regular: float = 1.0, estimator: str = "n2sls"):
    """Slopes of log RMSE on log n for lam and the x1 coefficient.

    Returns {regime: {"n": ..., "rmse_lam": ..., "rmse_beta1": ..., "slope_lam": ...,
    "slope_beta1": ...}} for regimes "irregular" (xi0 = 0) and "regular".
    """
    out = {}
    for regime, xi0 in (("irregular", 0.0), ("regular", xi_regular)):
        rl, rb = [], []
        for n in n_grid:
            crng = rng_for(seed, n, 0)
            W = build_knn(crng.uniform(size=(n, 2)), 6)
            el, eb = [], []
            for r in range(reps):
                model, th0 = simulate_endog(n, lam0, xi0, seed, r, W)
                fit = fit_feasible_n2sls(model)
                if estimator == "aglasso":
                    fit = select_alpha(model, feasible=fit)[1]
                el.append(fit.theta[0] - th0[0])
                eb.append(fit.theta[1] - th0[1])
            rl.append(math.sqrt(np.mean(np.square(el))))
            rb.append(math.sqrt(np.mean(np.square(eb))))
        ln = np.log(np.asarray(n_grid, dtype=float))
        out[regime] = dict(
            n=list(n_grid), rmse_lam=rl, rmse_beta1=rb,
            slope_lam=float(np.polyfit(ln, np.log(rl), 1)[0]),
            slope_beta1=float(np.polyfit(ln, np.log(rb), 1)[0]),
        )
    return out
