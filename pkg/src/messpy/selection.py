"""
Model selection and testing: non-nested J-tests between SAR and MESS
specifications with bootstrap p-values, a Vuong-type test between SARAR(1,1)
and MESS(1,1), information criteria, Mallows-type selection and averaging over
candidate weight matrices, Savage-Dickey density ratios and modified harmonic
mean marginal likelihoods.
"""

from __future__ import annotations

import functools
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.stats
from scipy.special import logsumexp

from . import expm as ex
from ._lq import dense, independent_columns, lq_cov, safe_inv
from ._profile import Profile
from .bayes import Chain, Priors, gaussian_loglik, integrated_loglik
from .model_core import C_BOUND, FitResult, MessData, ParamVector, rng_for, sample_moments
from .qmle import fit_qmle

B_BOOT = 99
STAT_NAMES = ("W1", "DD1", "G1", "W2", "DD2", "G2")
LOG2PI = math.log(2 * math.pi)


# ---------------------------------------------------------------------------
# SAR / SARAR quasi-maximum likelihood (dense log-determinants)
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def _eigs(W) -> np.ndarray:
    return np.linalg.eigvals(dense(W))


def _get_eigs(W):
    try:
        return _eigs(W)
    except TypeError:
        return np.linalg.eigvals(dense(W))


def _logdet(eigs: np.ndarray, a: float) -> float:
    return float(np.sum(np.log(np.abs(1.0 - a * eigs))))


def _param_bounds(eigs: np.ndarray, margin: float = 1e-3) -> tuple[float, float]:
    """Interval around 0 on which I - aW stays nonsingular."""
    if np.max(np.abs(eigs.imag)) < 1e-8:
        re = eigs.real
        lo = 1.0 / re.min() if re.min() < -1e-12 else -1e3
        hi = 1.0 / re.max() if re.max() > 1e-12 else 1e3
    else:
        r = np.max(np.abs(eigs))
        lo, hi = -1.0 / r, 1.0 / r
    return lo * (1 - margin), hi * (1 - margin)


@dataclass
class SararFit:
    """QML fit of Y = aWY + Xb + U, U = tMU + V (t = 0 for SAR)."""

    alpha: float
    tau: float
    beta: np.ndarray
    sigma2: float
    loglik: float
    contributions: np.ndarray
    residuals: np.ndarray       # V = (I - tM)((I - aW)Y - Xb)
    innovations: np.ndarray     # (I - aW)Y - Xb
    flags: list = field(default_factory=list)


def _sar_pieces(Y, X, W):
    WY = ex._as_csr(W) @ Y
    Q, _ = np.linalg.qr(X)
    ey = Y - Q @ (Q.T @ Y)
    ew = WY - Q @ (Q.T @ WY)
    return WY, np.array([ey @ ey, ey @ ew, ew @ ew])


def fit_sarar(Y, X, W, M=None, grid: int = 41) -> SararFit:
    """Concentrated Gaussian QML for SAR (M None) or SARAR(1,1)."""
    Y, X = np.asarray(Y, float), np.asarray(X, float)
    n = Y.size
    ew = _get_eigs(W)
    lo, hi = _param_bounds(ew)
    Wc = ex._as_csr(W)
    flags = []
    if M is None:
        WY, (a, b, c) = _sar_pieces(Y, X, W)

        def nll(al):
            s2 = max((a - 2 * al * b + al * al * c) / n, 1e-300)
            return 0.5 * n * math.log(s2) - _logdet(ew, al)

        g = np.linspace(lo, hi, grid)
        j = int(np.argmin([nll(v) for v in g]))
        res = scipy.optimize.minimize_scalar(
            nll, bounds=(g[max(j - 1, 0)], g[min(j + 1, grid - 1)]), method="bounded",
            options=dict(xatol=1e-10))
        alpha, tau = float(res.x), 0.0
        if min(alpha - lo, hi - alpha) < 1e-6 * (hi - lo):
            flags.append("boundary")
    else:
        em = _get_eigs(M)
        lo_t, hi_t = _param_bounds(em)
        Mc = ex._as_csr(M)
        WY = Wc @ Y
        MY, MWY, MX = Mc @ Y, Mc @ WY, Mc @ X

        def conc(al, t):
            A = (Y - t * MY) - al * (WY - t * MWY)
            Xt = X - t * MX
            bb = np.linalg.lstsq(Xt, A, rcond=None)[0]
            r = A - Xt @ bb
            return r, bb

        def nll(z):
            al, t = z
            if not (lo < al < hi and lo_t < t < hi_t):
                return np.inf
            r, _ = conc(al, t)
            return 0.5 * n * math.log(max(r @ r / n, 1e-300)) - _logdet(ew, al) - _logdet(em, t)

        ga = np.linspace(lo, hi, 11)[1:-1]
        gt = np.linspace(lo_t, hi_t, 11)[1:-1]
        start = min(((x, y) for x in ga for y in gt), key=lambda z: nll(z))
        res = scipy.optimize.minimize(nll, np.array(start), method="Nelder-Mead",
                                      options=dict(xatol=1e-9, fatol=1e-12, maxfev=4000))
        alpha, tau = float(res.x[0]), float(res.x[1])
        if not res.success:
            flags.append("no_convergence")
    Mc = None if M is None else ex._as_csr(M)
    WY = Wc @ Y
    if Mc is None:
        beta = np.linalg.lstsq(X, Y - alpha * WY, rcond=None)[0]
        u = Y - alpha * WY - X @ beta
        v = u
        ld = _logdet(ew, alpha)
    else:
        A = (Y - alpha * WY) - tau * (Mc @ (Y - alpha * WY))
        Xt = X - tau * (Mc @ X)
        beta = np.linalg.lstsq(Xt, A, rcond=None)[0]
        u = Y - alpha * WY - X @ beta
        v = u - tau * (Mc @ u)
        ld = _logdet(ew, alpha) + _logdet(_get_eigs(M), tau)
    s2 = float(v @ v / n)
    contrib = -0.5 * LOG2PI - 0.5 * math.log(s2) + ld / n - v**2 / (2 * s2)
    return SararFit(alpha, tau, beta, s2, float(contrib.sum()), contrib, v, u, flags)


# ---------------------------------------------------------------------------
# MESS(1,0) QML via a power basis in lam
# ---------------------------------------------------------------------------

def _power_basis(W, y: np.ndarray, c_bound: float) -> np.ndarray:
    """Columns W^j y / j! for j = 0..q, q set by the series tolerance."""
    Wc = ex._as_csr(W)
    q = ex.series_order(c_bound * max(ex._inf_norm(Wc), 1e-12), 1e-15, q_cap=150)
    cols = [np.asarray(y, float)]
    for j in range(1, q + 1):
        cols.append(Wc @ cols[-1] / j)
    return np.column_stack(cols)


def _powers(x: float, q: int) -> np.ndarray:
    return x ** np.arange(q + 1)


def _min_quadratic_poly(G: np.ndarray, lo: float, hi: float, grid: int = 81) -> float:
    """argmin over [lo, hi] of p(x)'Gp(x), p(x) = (1, x, x^2, ...)."""
    q = G.shape[0] - 1
    f = lambda x: float(_powers(x, q) @ G @ _powers(x, q))
    g = np.linspace(lo, hi, grid)
    j = int(np.argmin([f(v) for v in g]))
    res = scipy.optimize.minimize_scalar(
        f, bounds=(g[max(j - 1, 0)], g[min(j + 1, grid - 1)]), method="bounded",
        options=dict(xatol=1e-11))
    return float(res.x)


@dataclass
class Mess10Fit:
    lam: float
    beta: np.ndarray
    sigma2: float
    residuals: np.ndarray
    basis: np.ndarray


def fit_mess10(Y, X, W, c_bound: float = C_BOUND) -> Mess10Fit:
    """QMLE of e^{lam W} Y = X beta + V."""
    Y, X = np.asarray(Y, float), np.asarray(X, float)
    B = _power_basis(W, Y, c_bound)
    Q, _ = np.linalg.qr(X)
    MB = B - Q @ (Q.T @ B)
    lam = _min_quadratic_poly(MB.T @ MB, -c_bound, c_bound)
    SY = B @ _powers(lam, B.shape[1] - 1)
    beta = np.linalg.lstsq(X, SY, rcond=None)[0]
    v = SY - X @ beta
    return Mess10Fit(lam, beta, float(v @ v / Y.size), v, B)


# ---------------------------------------------------------------------------
# J-tests
# ---------------------------------------------------------------------------

@dataclass
class JTestResult:
    """W, DD and G statistics for both predictors with asymptotic and bootstrap p-values."""

    null: str
    statistics: dict
    pvalues_asymptotic: dict
    pvalues_bootstrap: dict | None
    hetero: bool
    B: int
    seed: int
    boot: np.ndarray | None = None
    flags: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def rejects(self, level: float = 0.05, bootstrap: bool = True) -> dict:
        p = self.pvalues_bootstrap if bootstrap else self.pvalues_asymptotic
        if p is None:
            raise ValueError("no bootstrap p-values; run with B > 0")
        return {k: bool(v < level) for k, v in p.items()}

    def to_dict(self) -> dict:
        return dict(null=self.null, statistics=self.statistics,
                    pvalues_asymptotic=self.pvalues_asymptotic,
                    pvalues_bootstrap=self.pvalues_bootstrap, hetero=self.hetero,
                    B=self.B, seed=self.seed, flags=list(self.flags))


def default_instruments(X, W, depth: int = 2) -> np.ndarray:
    """Independent columns of (X, WX, ..., W^depth X)."""
    Wc = ex._as_csr(W)
    cols, cur = [np.asarray(X, float)], np.asarray(X, float)
    for _ in range(depth):
        cur = Wc @ cur
        cols.append(cur)
    return independent_columns(np.hstack(cols))


def _quadratic_matrices(W, hetero: bool):
    Wd = dense(W)
    P1 = Wd - np.diag(np.diag(Wd))
    W2 = Wd @ Wd
    if hetero:
        P2 = W2 - np.diag(np.diag(W2))
    else:
        P2 = W2 - np.trace(W2) / Wd.shape[0] * np.eye(Wd.shape[0])
    return [P1, P2]


def _chi2_stats(D, Xi_inv, delta, g_tilde):
    """Wald and gradient statistics from plug-in D matrices."""
    Du, Dr = D
    Vu = np.linalg.pinv(Du.T @ Xi_inv @ Du)
    W = delta**2 / Vu[-1, -1] if Vu[-1, -1] > 0 else np.inf
    a = Dr.T @ Xi_inv @ g_tilde
    G = float(a @ np.linalg.pinv(Dr.T @ Xi_inv @ Dr) @ a)
    return float(W), G


def _gmm_linear_quadratic(Y, Z, Ps, F, L, start):
    """min ||L'g(eta)||^2, g = (V'P V ..., F'V), V = Y - Z eta."""
    Pss = [P + P.T for P in Ps]

    def g(eta):
        V = Y - Z @ eta
        return np.concatenate([[V @ P @ V for P in Ps], F.T @ V])

    def fun(eta):
        return L.T @ g(eta)

    def jac(eta):
        V = Y - Z @ eta
        J = np.vstack([-(Ps_ @ V) @ Z for Ps_ in Pss] + [-F.T @ Z])
        return L.T @ J

    res = scipy.optimize.least_squares(fun, start, jac=jac, method="lm", xtol=1e-12,
                                       ftol=1e-14, gtol=1e-14, max_nfev=400)
    f = fun(res.x)
    return res.x, float(f @ f), g(res.x)


def _sar_null_statistics(Y, X, W, F, Ps, hetero, c_bound):
    Wc = ex._as_csr(W)
    alt = fit_mess10(Y, X, W, c_bound)
    Xb_alt = X @ alt.beta
    Yh1 = ex.expm_action(Wc, -alt.lam, Xb_alt)
    SstarY = ex.expm_action(Wc, alt.lam, Y)
    Yh2 = Y - SstarY + Xb_alt
    null = fit_sarar(Y, X, W)
    v = null.residuals
    if hetero:
        var, m3, m4 = v**2, 0.0, None
    else:
        s2, m3, m4 = sample_moments(v)
        var = s2
    forms = [(None, P) for P in Ps] + [(F[:, j], None) for j in range(F.shape[1])]
    Xi = lq_cov(forms, var, m3, m4)
    Xi_inv, ridge = safe_inv(Xi)
    L = np.linalg.cholesky(0.5 * (Xi_inv + Xi_inv.T))
    WY = Wc @ Y
    Zr = np.column_stack([WY, X])
    eta_r, Q_r, g_r = _gmm_linear_quadratic(Y, Zr, Ps, F, L, np.r_[null.alpha, null.beta])
    PsS = [P + P.T for P in Ps]

    def dmat(Z, eta):
        V = Y - Z @ eta
        return np.vstack([(P @ V) @ Z for P in PsS] + [F.T @ Z])

    out = []
    for Yh in (Yh1, Yh2):
        Zu = np.column_stack([Zr, Yh])
        eta_u, Q_u, _ = _gmm_linear_quadratic(Y, Zu, Ps, F, L, np.r_[eta_r, 0.0])
        DD = max(Q_r - Q_u, 0.0)
        Wst, Gst = _chi2_stats((dmat(Zu, eta_u), dmat(Zu, np.r_[eta_r, 0.0])), Xi_inv,
                               eta_u[-1], g_r)
        out += [Wst, DD, Gst]
    flags = ["xi_ridge"] if ridge else []
    return np.array(out), null, flags


def _mess_null_statistics(Y, X, W, F, hetero, c_bound):
    Wc = ex._as_csr(W)
    alt = fit_sarar(Y, X, W)
    Xb_alt = X @ alt.beta
    n = Y.size
    Wd = dense(W)
    Yh1 = np.linalg.solve(np.eye(n) - alt.alpha * Wd, Xb_alt)
    Yh2 = alt.alpha * (Wc @ Y) + Xb_alt
    null = fit_mess10(Y, X, W, c_bound)
    v = null.residuals
    Xi = (F.T * v**2) @ F if hetero else null.sigma2 * (F.T @ F)
    Xi_inv, ridge = safe_inv(Xi)
    L = np.linalg.cholesky(0.5 * (Xi_inv + Xi_inv.T))
    B = null.basis
    q = B.shape[1] - 1
    LFB = L.T @ (F.T @ B)

    def fit(Zr):
        LFZ = L.T @ (F.T @ Zr)
        Qz, _ = np.linalg.qr(LFZ)
        R = LFB - Qz @ (Qz.T @ LFB)
        lam = _min_quadratic_poly(R.T @ R, -c_bound, c_bound)
        SY = B @ _powers(lam, q)
        coef = np.linalg.lstsq(LFZ, L.T @ (F.T @ SY), rcond=None)[0]
        g = F.T @ (SY - Zr @ coef)
        return lam, coef, float(g @ Xi_inv @ g), g

    lam_r, b_r, Q_r, g_r = fit(X)
    degenerate = []

    def dmat(lam, Zu):
        SY = B @ _powers(lam, q)
        return F.T @ np.column_stack([Wc @ SY, Zu])

    out = []
    for r, Yh in ((1, Yh1), (2, Yh2)):
        Zu = np.column_stack([X, Yh])
        if np.linalg.matrix_rank(Zu) < Zu.shape[1]:
            degenerate.append(r)
        lam_u, b_u, Q_u, _ = fit(Zu)
        DD = max(Q_r - Q_u, 0.0)
        Wst, Gst = _chi2_stats((dmat(lam_u, Zu), dmat(lam_r, Zu)), Xi_inv, b_u[-1], g_r)
        out += [Wst, DD, Gst]
    flags = (["xi_ridge"] if ridge else []) + [f"degenerate_predictor:{r}" for r in degenerate]
    return np.array(out), null, flags


def _boot_draw(v: np.ndarray, rng: np.random.Generator, hetero: bool) -> np.ndarray:
    if hetero:
        return v * rng.choice([-1.0, 1.0], size=v.size)
    return v[rng.integers(0, v.size, size=v.size)]


def _boot_one(args):
    kind, Y_b, X, W, F, Ps, hetero, c_bound = args
    try:
        if kind == "sar":
            s, _, _ = _sar_null_statistics(Y_b, X, W, F, Ps, hetero, c_bound)
        else:
            s, _, _ = _mess_null_statistics(Y_b, X, W, F, hetero, c_bound)
    except (np.linalg.LinAlgError, ValueError):
        s = np.full(6, np.nan)
    return s


def _assemble(kind, stats, boot, hetero, B, seed, flags, info):
    names = STAT_NAMES
    asym = {k: float(scipy.stats.chi2.sf(s, 1)) for k, s in zip(names, stats)}
    pboot = None
    if boot is not None and len(boot):
        pboot = {}
        for j, k in enumerate(names):
            col = boot[:, j]
            ok = np.isfinite(col)
            pboot[k] = float(np.mean(col[ok] > stats[j])) if ok.any() else float("nan")
        if not np.all(np.isfinite(boot)):
            flags = flags + ["bootstrap_failures"]
    return JTestResult(kind, dict(zip(names, map(float, stats))), asym, pboot, hetero, B,
                       seed, boot, flags, info)


def _run_boot(kind, make_y, X, W, F, Ps, hetero, c_bound, B, seed, workers):
    jobs = [(kind, make_y(rng_for(seed, b, 31)), X, W, F, Ps, hetero, c_bound) for b in range(B)]
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return np.array(list(pool.map(_boot_one, jobs)))
    return np.array([_boot_one(j) for j in jobs])


def jtest_sarar_null(Y, X, W, B_boot: int = B_BOOT, seed: int = 0, depth: int = 2,
                     hetero: bool = False, c_bound: float = C_BOUND,
                     workers: int = 1) -> JTestResult:
    """Test the SAR null against the MESS alternative.

    The null is augmented with each MESS predictor and fit by feasible
    optimal GMM with two quadratic and the linear IV moments.  Bootstrap
    samples are built from the null fit with resampled (or, with
    ``hetero``, Rademacher wild) residuals.
    """
    Y, X = np.asarray(Y, float), np.asarray(X, float)
    F = default_instruments(X, W, depth)
    Ps = _quadratic_matrices(W, hetero)
    stats, null, flags = _sar_null_statistics(Y, X, W, F, Ps, hetero, c_bound)
    boot = None
    if B_boot > 0:
        n = Y.size
        Sinv_solve = scipy.linalg.lu_factor(np.eye(n) - null.alpha * dense(W))
        mean = X @ null.beta
        make = lambda rng: scipy.linalg.lu_solve(Sinv_solve, mean + _boot_draw(null.residuals, rng, hetero))
        boot = _run_boot("sar", make, X, W, F, Ps, hetero, c_bound, B_boot, seed, workers)
    info = dict(null_alpha=null.alpha, instruments=F.shape[1], depth=depth)
    return _assemble("sar", stats, boot, hetero, B_boot, seed, flags, info)


def jtest_mess_null(Y, X, W, B_boot: int = B_BOOT, seed: int = 0, depth: int = 2,
                    hetero: bool = False, c_bound: float = C_BOUND,
                    workers: int = 1, F=None) -> JTestResult:
    """Test the MESS null against the SAR alternative by nonlinear 2SLS."""
    Y, X = np.asarray(Y, float), np.asarray(X, float)
    F = default_instruments(X, W, depth) if F is None else np.asarray(F, float)
    if np.linalg.matrix_rank(F) < F.shape[1]:
        raise ValueError("instrument matrix F is rank deficient")
    stats, null, flags = _mess_null_statistics(Y, X, W, F, hetero, c_bound)
    boot = None
    if B_boot > 0:
        Wc = ex._as_csr(W)
        mean = X @ null.beta
        make = lambda rng: ex.expm_action(Wc, -null.lam, mean + _boot_draw(null.residuals, rng, hetero))
        boot = _run_boot("mess", make, X, W, F, None, hetero, c_bound, B_boot, seed, workers)
    info = dict(null_lambda=null.lam, instruments=F.shape[1], depth=depth)
    return _assemble("mess", stats, boot, hetero, B_boot, seed, flags, info)


# ---------------------------------------------------------------------------
# Vuong-type test
# ---------------------------------------------------------------------------

@dataclass
class VuongResult:
    statistic: float
    decision: str          # "sarar", "mess" or "equivalent"
    pvalue: float
    omega2: float
    sigma_hat: float
    mean_g: float
    flags: list = field(default_factory=list)


def mess_contributions(data: MessData, fit: FitResult) -> np.ndarray:
    v = fit.residuals
    s2 = float(v @ v / v.size)
    return -0.5 * LOG2PI - 0.5 * math.log(s2) - v**2 / (2 * s2)


def vuong_test(data: MessData, sarar_fit: SararFit | None = None,
               mess_fit: FitResult | None = None, seed: int = 0,
               sigma_scale: float | None = None, level: float = 0.05) -> VuongResult:
    """Non-degenerate Vuong statistic; positive values favour SARAR(1,1).

    The regularizing scalar defaults to n^{-1/4} sd(g); ``sigma_scale``
    replaces the n^{-1/4} factor.
    """
    n = data.n
    s1 = sarar_fit or fit_sarar(data.Y, data.X, data.W, data.M)
    s2 = mess_fit or fit_qmle(data, vcov=None)
    g = s1.contributions - mess_contributions(data, s2)
    omega2 = float(np.var(g))
    flags = []
    scale = n ** -0.25 if sigma_scale is None else float(sigma_scale)
    sd = math.sqrt(omega2)
    if sd <= 0 or not np.isfinite(sd):
        flags.append("degenerate_variance")
        sig = 1.0
    else:
        sig = scale * sd
    U = rng_for(seed, 41).standard_normal()
    T = (g.sum() / math.sqrt(n) + sig * U) / math.sqrt(omega2 + sig**2)
    crit = scipy.stats.norm.ppf(1 - level / 2)
    decision = "sarar" if T > crit else "mess" if T < -crit else "equivalent"
    p = float(2 * scipy.stats.norm.sf(abs(T)))
    return VuongResult(float(T), decision, p, omega2, sig, float(g.mean()), flags)


# ---------------------------------------------------------------------------
# Information criteria
# ---------------------------------------------------------------------------

@dataclass
class CriterionReport:
    aic: float
    bic: float
    dic: float | None
    p_D: float | None
    n_params: int
    variant: str
    bic_convention: str
    log_ml: float | None = None
    sddr: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _free_names(chain: Chain) -> list:
    fixed_beta = "beta" in chain.fixed
    return [nm for nm in chain.names if not (fixed_beta and nm.startswith("beta"))]


def _chain_logliks(chain: Chain, data: MessData, prof: Profile | None = None):
    """Per-draw log likelihood (Gaussian or integrated) and the value at the posterior mean."""
    prof = prof or Profile(data, chain.info.get("c_bound", C_BOUND))
    hetero = bool(chain.info.get("hetero", False))

    def ll(p: ParamVector, nu):
        v, _ = prof.resid(p.lam, p.rho, p.beta)
        if hetero:
            return integrated_loglik(data, p, nu, v)
        return -0.5 * data.n * math.log(2 * math.pi * p.sigma2) - 0.5 * (v @ v) / p.sigma2

    nus = chain.column("nu") if "nu" in chain.names else np.full(len(chain.draws), chain.fixed.get("nu", np.nan))
    vals = np.array([ll(chain.params_at(r), nus[r]) for r in range(len(chain.draws))])
    at_mean = ll(chain.posterior_mean_params(), float(np.mean(nus)))
    return vals, at_mean


def info_criteria(data: MessData, fit: FitResult | None = None, chain: Chain | None = None,
                  variant: str | None = None, bic: str = "double") -> CriterionReport:
    """AIC, BIC and (with a chain) DIC.

    ``variant`` is "gaussian" or "integrated"; the conditional likelihood
    is refused because criteria built on it are unreliable.  ``bic``
    selects the 2p ln(n) ("double") or p ln(n) ("standard") penalty.
    """
    hetero = bool(chain is not None and chain.info.get("hetero", False))
    variant = variant or ("integrated" if hetero else "gaussian")
    if variant == "conditional":
        raise ValueError("criteria on the conditional likelihood are not supported")
    if variant not in ("gaussian", "integrated"):
        raise ValueError(f"unknown likelihood variant {variant!r}")
    if variant == "integrated" and not hetero:
        raise ValueError("integrated likelihood requires a heteroskedastic chain")
    if bic not in ("double", "standard"):
        raise ValueError("bic must be 'double' or 'standard'")
    if fit is None and chain is None:
        raise ValueError("need a fit or a chain")
    n = data.n
    dic = p_D = None
    if chain is not None:
        vals, at_mean = _chain_logliks(chain, data)
        p = len(_free_names(chain))
        p_D = float(-2 * vals.mean() + 2 * at_mean)
        dic = float(-4 * vals.mean() + 2 * at_mean)
    if fit is not None:
        s2 = fit.params.sigma2 or float(fit.residuals @ fit.residuals / n)
        ll_hat = gaussian_loglik(data, ParamVector(fit.params.beta, fit.params.lam,
                                                   fit.params.rho, s2))
        p = fit.params.beta.size + 3
    else:
        ll_hat = at_mean
    aic = -2 * ll_hat + 2 * p
    mult = 2.0 if bic == "double" else 1.0
    return CriterionReport(float(aic), float(-2 * ll_hat + mult * p * math.log(n)), dic, p_D,
                           p, variant, bic)


# ---------------------------------------------------------------------------
# Mallows-type selection and averaging
# ---------------------------------------------------------------------------

@dataclass
class CpReport:
    values: np.ndarray
    selected: int
    weights: np.ndarray
    penalties: np.ndarray
    fitted: np.ndarray            # n x S candidate mean estimates
    fits: list
    dropped: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(values=self.values.tolist(), selected=int(self.selected),
                    weights=self.weights.tolist(), penalties=self.penalties.tolist(),
                    dropped=list(self.dropped), flags=list(self.flags))


def _cp_pieces(Y, X, W, M, fit: FitResult):
    """Dense pieces of the candidate mean map and its parameter derivatives."""
    lam, rho, beta = fit.params.lam, fit.params.rho, fit.params.beta
    Wc, Mc = ex._as_csr(W), ex._as_csr(M)
    Wd, Md = dense(W), dense(M)
    S = ex.expm_dense_via_action(Wc, lam)
    Sinv = ex.expm_dense_via_action(Wc, -lam)
    R = ex.expm_dense_via_action(Mc, rho)
    RX = R @ X
    A_inv = np.linalg.inv(RX.T @ RX)
    SY = S @ Y
    V = R @ (SY - X @ beta)
    Ydot = R @ (Wd @ SY)
    Ms = Md + Md.T
    SinvX = Sinv @ X
    mu = SinvX @ beta
    dmu_lam = -Wd @ mu + SinvX @ (A_inv @ (RX.T @ Ydot))
    dmu_rho = SinvX @ (A_inv @ (X.T @ (Md.T @ (R.T @ V) + R.T @ (R @ (Md @ (SY - X @ beta))))))
    k = X.shape[1]
    H = np.zeros((k + 2, k + 2))
    H[:k, :k] = 2 * RX.T @ RX
    H[:k, k] = -2 * RX.T @ Ydot
    H[:k, k + 1] = -2 * RX.T @ (Ms @ V)
    H[k, k] = 2 * (Ydot @ Ydot + V @ (R @ (Wd @ (Wd @ SY))))
    H[k, k + 1] = 2 * Ydot @ (Ms @ V)
    H[k + 1, k + 1] = 2 * V @ (Md.T @ (Ms @ V))
    H = np.triu(H) + np.triu(H, 1).T
    RS = R @ S
    J = np.vstack([
        -2 * RX.T @ RS,
        2 * ((V @ R) @ (Wd @ S) + Ydot @ RS),
        2 * (Ms @ V) @ RS,
    ])
    dgam = -np.linalg.solve(H, J)
    T = RX.T @ RS                   # k x n, mu = Sinv X A^{-1} T Y
    return dict(mu=mu, dmu_lam=dmu_lam, dmu_rho=dmu_rho, dlam=dgam[k], drho=dgam[k + 1],
                T=T, A_inv=A_inv, SinvX=SinvX, Sinv=Sinv, R=R)


def omega_from_fit(fit: FitResult, W, M) -> np.ndarray:
    """sigma^2 e^{-lam W} e^{-rho M} e^{-rho M'} e^{-lam W'}."""
    K = ex.expm_dense_via_action(ex._as_csr(W), -fit.params.lam) @ \
        ex.expm_dense_via_action(ex._as_csr(M), -fit.params.rho)
    s2 = fit.params.sigma2 or float(fit.residuals @ fit.residuals / fit.residuals.size)
    return s2 * (K @ K.T)


def cp_derivatives(Y, X, W, M, fit: FitResult) -> dict:
    """d(lam, rho)/dY' by implicit differentiation and the mean-map derivatives."""
    return _cp_pieces(np.asarray(Y, float), np.asarray(X, float), W, M, fit)


def _simplex_qp(G: np.ndarray, c: np.ndarray) -> np.ndarray:
    """argmin w'Gw + 2c'w over the probability simplex."""
    S = c.size
    if S == 1:
        return np.ones(1)
    f = lambda w: float(w @ G @ w + 2 * c @ w)
    if S > 12:
        cons = ({"type": "eq", "fun": lambda w: w.sum() - 1.0},)
        res = scipy.optimize.minimize(f, np.full(S, 1.0 / S), method="SLSQP",
                                      bounds=[(0, 1)] * S, constraints=cons,
                                      options=dict(ftol=1e-14, maxiter=500))
        w = np.clip(res.x, 0, None)
        return w / w.sum()
    best, best_val = None, np.inf
    for size in range(1, S + 1):
        for T in itertools.combinations(range(S), size):
            T = list(T)
            m = len(T)
            K = np.zeros((m + 1, m + 1))
            K[:m, :m] = 2 * G[np.ix_(T, T)]
            K[:m, m] = 1.0
            K[m, :m] = 1.0
            rhs = np.r_[-2 * c[T], 1.0]
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            wT = sol[:m]
            if np.any(wT < -1e-12) or abs(wT.sum() - 1) > 1e-8:
                continue
            w = np.zeros(S)
            w[T] = np.clip(wT, 0, None)
            w /= w.sum()
            val = f(w)
            if best is None or val < best_val - 1e-12 * (1 + abs(best_val)):
                best, best_val = w, val
    return best


def mallows_cp(Y, X, candidates, Omega=None, c_bound: float = C_BOUND) -> CpReport:
    """Mallows-type criterion over candidate (W, M) pairs, with averaging weights.

    ``Omega`` defaults to the covariance implied by the candidate with the
    smallest residual variance.
    """
    Y, X = np.asarray(Y, float), np.asarray(X, float)
    if len(candidates) < 1:
        raise ValueError("need at least one candidate")
    fits, kept, dropped = [], [], []
    for s, (Ws, Ms) in enumerate(candidates):
        try:
            f = fit_qmle(MessData(Y, X, Ws, Ms), c_bound, vcov=None)
        except (np.linalg.LinAlgError, ValueError):
            dropped.append(s)
            continue
        if not f.converged and "boundary" not in f.flags:
            dropped.append(s)
            continue
        fits.append(f)
        kept.append(s)
    if not kept:
        raise ValueError("every candidate fit failed")
    if Omega is None:
        j = int(np.argmin([f.params.sigma2 for f in fits]))
        Omega = omega_from_fit(fits[j], *candidates[kept[j]])
    Omega = np.asarray(Omega, float)
    mus, pens = [], []
    for f, s in zip(fits, kept):
        d = _cp_pieces(Y, X, *candidates[s], f)
        tr = float(np.trace(d["A_inv"] @ d["T"] @ (Omega @ d["SinvX"])))
        pen = tr + d["dlam"] @ (Omega @ d["dmu_lam"]) + d["drho"] @ (Omega @ d["dmu_rho"])
        mus.append(d["mu"])
        pens.append(pen)
    E = np.column_stack(mus)
    pens = np.array(pens)
    resid = E - Y[:, None]
    vals_kept = np.sum(resid**2, axis=0) + 2 * pens
    G = E.T @ E
    w_kept = _simplex_qp(G, pens - E.T @ Y)
    S = len(candidates)
    values = np.full(S, np.inf)
    values[kept] = vals_kept
    weights = np.zeros(S)
    weights[kept] = w_kept
    pen_all = np.full(S, np.nan)
    pen_all[kept] = pens
    flags = [f"dropped:{s}" for s in dropped]
    return CpReport(values, int(np.argmin(values)), weights, pen_all, E, fits, dropped, flags)


def cp_average(Y, X, candidates, Omega=None, c_bound: float = C_BOUND) -> np.ndarray:
    return mallows_cp(Y, X, candidates, Omega, c_bound).weights


def cp_weight_criterion(report: CpReport, Y, w) -> float:
    """C(w) for candidates kept in ``report``."""
    kept = [s for s in range(report.values.size) if np.isfinite(report.values[s])]
    w = np.asarray(w, float)[kept]
    r = report.fitted @ w - np.asarray(Y, float)
    return float(r @ r + 2 * w @ report.penalties[kept])


# ---------------------------------------------------------------------------
# Savage-Dickey density ratio
# ---------------------------------------------------------------------------

@dataclass
class SddrResult:
    bf: float
    log_bf: float
    prior_at_zero: float
    posterior_at_zero: float
    grid: np.ndarray
    param: str


def sddr_grid(m: int, tau: float, seed: int = 0) -> np.ndarray:
    """Stratified uniform points on (-tau, tau) plus 0, sorted."""
    rng = rng_for(seed, 53)
    edges = np.linspace(-tau, tau, m + 1)
    pts = edges[:-1] + rng.uniform(size=m) * np.diff(edges)
    return np.unique(np.r_[pts, 0.0])


def _poly_grams(chain: Chain, data: MessData, param: str):
    """Per-draw (G, b, c) with ||V(x)||_w^2 = p'Gp - 2p'b + c in the power vector p(x)."""
    Wc, Mc = ex._as_csr(data.W), ex._as_csr(data.M)
    cb = chain.info.get("c_bound", C_BOUND)
    etas = chain.eta if chain.info.get("hetero") and chain.eta is not None else None
    if param == "lambda":
        Bw = _power_basis(Wc, data.Y, cb)
    for r in range(len(chain.draws)):
        p = chain.params_at(r)
        wts = 1.0 / etas[r] if etas is not None else None
        if param == "lambda":
            C = ex.expm_action(Mc, p.rho, Bw)
            c0 = ex.expm_action(Mc, p.rho, data.X @ p.beta)
        else:
            u = ex.expm_action(Wc, p.lam, data.Y) - data.X @ p.beta
            C = _power_basis(Mc, u, cb)
            c0 = np.zeros(data.n)
        Cw = C if wts is None else C * wts[:, None]
        yield Cw.T @ C, Cw.T @ c0, float(c0 @ (c0 if wts is None else wts * c0)), p


def sddr(chain: Chain, data: MessData, priors: Priors, param: str = "lambda",
         m: int = 1001, tau: float | None = None, grid=None, seed: int = 0) -> SddrResult:
    """Bayes factor of the unrestricted model against ``param`` = 0.

    Each draw's conditional kernel is normalized on the grid by the
    trapezoid rule and the normalized kernels at 0 are averaged.
    """
    if param not in ("lambda", "rho"):
        raise ValueError("param must be 'lambda' or 'rho'")
    if param not in chain.names:
        raise ValueError(f"{param} is fixed in this chain")
    cb = chain.info.get("c_bound", C_BOUND)
    tau = cb if tau is None else float(tau)
    grid = sddr_grid(m, tau, seed) if grid is None else np.unique(np.asarray(grid, float))
    if not np.any(grid == 0.0):
        raise ValueError("grid must contain 0")
    if grid.size < 2:
        raise ValueError("grid must contain points other than 0")
    i0 = int(np.flatnonzero(grid == 0.0)[0])
    mu, V = (priors.mu_lam, priors.V_lam) if param == "lambda" else (priors.mu_rho, priors.V_rho)
    logprior = -0.5 * (grid - mu) ** 2 / V
    dens0 = []
    P = None
    for G, b, c, p in _poly_grams(chain, data, param):
        if P is None:
            P = grid[None, :] ** np.arange(G.shape[0])[:, None]
        quad = np.einsum("im,im->m", G @ P, P) - 2 * (b @ P) + c
        lk = -0.5 * quad / p.sigma2 + logprior
        lk -= lk.max()
        k = np.exp(lk)
        dens0.append(k[i0] / np.trapezoid(k, grid))
    post0 = float(np.mean(dens0))
    prior0 = priors.spatial_density(param, 0.0, cb)
    return SddrResult(prior0 / post0, math.log(prior0) - math.log(post0), prior0, post0, grid, param)


# ---------------------------------------------------------------------------
# Modified harmonic mean
# ---------------------------------------------------------------------------

def log_posterior_kernels(chain: Chain, data: MessData, priors: Priors) -> np.ndarray:
    """log p(Y|theta_r) + log p(theta_r) at every draw, over the free parameters."""
    vals, _ = _chain_logliks(chain, data)
    cb = chain.info.get("c_bound", C_BOUND)
    free = set(_free_names(chain))
    out = np.empty(len(chain.draws))
    for r in range(len(chain.draws)):
        p = chain.params_at(r)
        nu = chain.draws[r, chain.names.index("nu")] if "nu" in free else None
        out[r] = vals[r] + priors.log_density(
            beta=p.beta if "beta1" in free else None,
            lam=p.lam if "lambda" in free else None,
            rho=p.rho if "rho" in free else None,
            sigma2=p.sigma2 if "sigma2" in free else None,
            nu=nu, c_bound=cb)
    return out


def marginal_likelihood_mhm(chain: Chain, data: MessData | None = None,
                            priors: Priors | None = None, alpha_trunc: float = 0.05,
                            log_kernels=None) -> tuple[float, dict]:
    """Log marginal likelihood with a truncated-normal weighting density.

    ``log_kernels`` may be supplied directly (log likelihood plus log prior
    per draw); otherwise they are computed from ``data`` and ``priors``.
    """
    if log_kernels is None:
        if data is None or priors is None:
            raise ValueError("need data and priors or precomputed log kernels")
        log_kernels = log_posterior_kernels(chain, data, priors)
    log_kernels = np.asarray(log_kernels, float)
    cols = [chain.names.index(nm) for nm in _free_names(chain)]
    T = chain.draws[:, cols]
    p = T.shape[1]
    mean = T.mean(axis=0)
    cov = np.atleast_2d(np.cov(T, rowvar=False))
    L = np.linalg.cholesky(cov)
    Z = scipy.linalg.solve_triangular(L, (T - mean).T, lower=True)
    d2 = np.sum(Z**2, axis=0)
    cut = scipy.stats.chi2.ppf(1 - alpha_trunc, p) if alpha_trunc > 0 else np.inf
    inside = d2 < cut
    if not inside.any():
        raise ValueError("no draws fall inside the truncation set")
    logdet = 2 * np.sum(np.log(np.diag(L)))
    log_g = -math.log1p(-alpha_trunc) - 0.5 * (p * LOG2PI + logdet) - 0.5 * d2
    terms = log_g[inside] - log_kernels[inside]
    log_ml = -(logsumexp(terms) - math.log(len(T)))
    return float(log_ml), dict(inside=int(inside.sum()), p=p, cutoff=float(cut))
