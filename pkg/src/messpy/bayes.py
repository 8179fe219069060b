"""
Gibbs / random-walk Metropolis-Hastings samplers for the homoskedastic and
scale-mixture (Student-t) heteroskedastic models, Griddy-Gibbs for the
degrees of freedom, and the Gaussian and integrated log likelihoods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, ndtr

from ._profile import Profile
from .model_core import C_BOUND, MessData, ParamVector, residuals, rng_for

TUNE_EVERY = 50
TUNE_FACTOR = 1.1
TARGET_BAND = (0.45, 0.55)


@dataclass
class Priors:
    """Independent normal priors on lam, rho and beta; IG(a, b) on sigma2; nu ~ U(2, nu_bar)."""

    mu_beta: np.ndarray
    V_beta: np.ndarray
    mu_lam: float = 0.0
    V_lam: float = 100.0
    mu_rho: float = 0.0
    V_rho: float = 100.0
    a: float = 0.01
    b: float = 0.01
    nu_bar: float = 50.0

    def __post_init__(self):
        self.mu_beta = np.atleast_1d(np.asarray(self.mu_beta, dtype=float))
        self.V_beta = np.atleast_2d(np.asarray(self.V_beta, dtype=float))
        if not (self.V_lam > 0 and self.V_rho > 0 and self.a > 0 and self.b > 0):
            raise ValueError("prior variances and IG parameters must be positive")
        if self.nu_bar <= 2:
            raise ValueError("nu_bar must exceed 2")
        try:
            np.linalg.cholesky(self.V_beta)
        except np.linalg.LinAlgError as exc:
            raise ValueError("V_beta must be positive definite") from exc

    @classmethod
    def default(cls, k: int, **kw) -> "Priors":
        return cls(np.zeros(k), 100.0 * np.eye(k), **kw)

    def log_normal(self, x, mu, V, c_bound=None):
        """Normal log density, renormalized to (-c_bound, c_bound) when given."""
        out = -0.5 * math.log(2 * math.pi * V) - 0.5 * (x - mu) ** 2 / V
        if c_bound is not None:
            if abs(x) >= c_bound:
                return -np.inf
            s = math.sqrt(V)
            out -= math.log(ndtr((c_bound - mu) / s) - ndtr((-c_bound - mu) / s))
        return out

    def spatial_density(self, name: str, x: float, c_bound=None) -> float:
        mu, V = (self.mu_lam, self.V_lam) if name == "lambda" else (self.mu_rho, self.V_rho)
        return math.exp(self.log_normal(x, mu, V, c_bound))

    def log_beta(self, beta):
        d = beta - self.mu_beta
        _, logdet = np.linalg.slogdet(self.V_beta)
        k = d.size
        return -0.5 * (k * math.log(2 * math.pi) + logdet + d @ np.linalg.solve(self.V_beta, d))

    def log_sigma2(self, s2):
        a, b = self.a, self.b
        return a * math.log(b) - gammaln(a) - (a + 1) * math.log(s2) - b / s2

    def log_density(self, beta=None, lam=None, rho=None, sigma2=None, nu=None,
                    c_bound=None) -> float:
        """Sum of the log prior densities of the supplied (free) parameters.

        With ``c_bound`` the spatial priors are the normals truncated to
        (-c_bound, c_bound), which is what the samplers draw from.
        """
        out = 0.0
        if beta is not None:
            out += self.log_beta(np.asarray(beta))
        if lam is not None:
            out += self.log_normal(lam, self.mu_lam, self.V_lam, c_bound)
        if rho is not None:
            out += self.log_normal(rho, self.mu_rho, self.V_rho, c_bound)
        if sigma2 is not None:
            out += self.log_sigma2(sigma2)
        if nu is not None:
            out += -math.log(self.nu_bar - 2.0) if 2 < nu < self.nu_bar else -np.inf
        return out


@dataclass
class Chain:
    """Retained draws; columns named in ``names``."""

    draws: np.ndarray
    names: list[str]
    acceptance_lam: float
    acceptance_rho: float
    c_lam: float
    c_rho: float
    burn: int
    eta: np.ndarray | None = None
    fixed: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    @property
    def k(self) -> int:
        return sum(nm.startswith("beta") for nm in self.names)

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def sd(self) -> np.ndarray:
        return self.draws.std(axis=0, ddof=1) if len(self.draws) > 1 else np.zeros(self.draws.shape[1])

    def interval(self, level: float = 0.95) -> np.ndarray:
        """Equal-tailed posterior quantile interval, shape (p, 2)."""
        a = (1 - level) / 2
        return np.quantile(self.draws, [a, 1 - a], axis=0).T

    def params_at(self, r: int) -> ParamVector:
        row = self.draws[r]
        get = lambda nm, default: row[self.names.index(nm)] if nm in self.names else default
        beta = row[: self.k]
        return ParamVector(beta, get("lambda", self.fixed.get("lam", 0.0)),
                           get("rho", self.fixed.get("rho", 0.0)),
                           get("sigma2", self.fixed.get("sigma2", 1.0)))

    def posterior_mean_params(self) -> ParamVector:
        m = self.mean()
        get = lambda nm, default: m[self.names.index(nm)] if nm in self.names else default
        return ParamVector(m[: self.k], get("lambda", self.fixed.get("lam", 0.0)),
                           get("rho", self.fixed.get("rho", 0.0)),
                           get("sigma2", self.fixed.get("sigma2", 1.0)))

    def write(self, path) -> None:
        np.savetxt(path, self.draws, delimiter=",", header=",".join(self.names),
                   comments="", fmt="%.17g")


def rw_mh_step(current: float, log_kernel, c_tune: float, rng: np.random.Generator,
               current_logk: float | None = None):
    """One random-walk MH step; returns (value, accepted, log kernel at value)."""
    lk0 = log_kernel(current) if current_logk is None else current_logk
    prop = current + c_tune * rng.standard_normal()
    lk1 = log_kernel(prop)
    if np.isfinite(lk1) and math.log(rng.uniform()) < lk1 - lk0:
        return prop, True, lk1
    return current, False, lk0


def log_nu_conditional(nu, eta: np.ndarray) -> np.ndarray:
    """log p(nu | eta) up to a constant, vectorized over ``nu``."""
    nu = np.asarray(nu, dtype=float)
    n = eta.size
    sl, si = np.sum(np.log(eta)), np.sum(1.0 / eta)
    h = nu / 2
    return n * h * np.log(h) - n * gammaln(h) - (h + 1) * sl - h * si


def nu_grid(nu_bar: float, grid_size: int) -> np.ndarray:
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    return np.linspace(2.0, nu_bar, grid_size + 2)[1:-1]


def griddy_gibbs_nu(eta, nu_bar: float, grid_size: int, rng: np.random.Generator,
                    log_density=None) -> float:
    """Inverse-CDF draw of nu from its conditional evaluated on a grid."""
    grid = nu_grid(nu_bar, grid_size)
    lp = log_nu_conditional(grid, np.asarray(eta)) if log_density is None else log_density(grid)
    lp = lp - np.max(lp)
    cum = np.cumsum(np.exp(lp))
    cum /= cum[-1]
    return float(grid[min(np.searchsorted(cum, rng.uniform()), grid.size - 1)])


def gaussian_loglik(data: MessData, p: ParamVector) -> float:
    v = residuals(data, p)
    n = data.n
    return -0.5 * n * math.log(2 * math.pi * p.sigma2) - 0.5 * (v @ v) / p.sigma2


def integrated_loglik(data: MessData, p: ParamVector, nu: float, v=None) -> float:
    """Student-t log likelihood with the scale-mixture variables integrated out."""
    if nu <= 2:
        raise ValueError("nu must exceed 2")
    v = residuals(data, p) if v is None else v
    n, s2 = data.n, p.sigma2
    h = nu / 2
    return float(
        -0.5 * n * math.log(2 * math.pi) - 0.5 * n * math.log(s2) + n * h * math.log(h)
        + n * gammaln(h + 0.5) - n * gammaln(h)
        - (h + 0.5) * np.sum(np.log(h + v**2 / (2 * s2)))
    )


class _Sampler:
    """State and one Gibbs sweep; ``prof`` supplies e^{rho M}e^{lam W}Y and e^{rho M}X."""

    def __init__(self, prof: Profile, priors: Priors, rng, hetero: bool, fixed: dict,
                 c_bound: float, grid_size: int, init: dict | None = None):
        n = prof.data.n
        self.prof, self.pr, self.rng, self.hetero = prof, priors, rng, hetero
        self.fixed, self.c_bound, self.grid_size = dict(fixed), c_bound, grid_size
        init = dict(init or {})
        self.lam = float(self.fixed.get("lam", init.get("lam", 0.0)))
        self.rho = float(self.fixed.get("rho", init.get("rho", 0.0)))
        self.s2 = float(self.fixed.get("sigma2", init.get("sigma2", 1.0)))
        self.beta = np.asarray(init.get("beta", priors.mu_beta), dtype=float).copy()
        self.eta = np.ones(n)
        self.nu = float(self.fixed.get("nu", init.get("nu", min(priors.nu_bar / 2, 30.0))))
        c0 = 2.4 / math.sqrt(n)
        self.c = {"lam": c0, "rho": c0}
        self.acc = {"lam": 0, "rho": 0}
        self.win = {"lam": 0, "rho": 0}
        self.Vb_inv = np.linalg.inv(priors.V_beta)
        self._rx_key, self._rx_val = None, None
        self._z_memo = {}

    def _rx(self, rho):
        if rho != self._rx_key:
            self._rx_key, self._rx_val = rho, self.prof.RX(rho)
        return self._rx_val

    def _z(self, lam, rho):
        key = (lam, rho)
        if key not in self._z_memo:
            if len(self._z_memo) > 4:
                self._z_memo.clear()
            self._z_memo[key] = self.prof.Z(lam, rho)
        return self._z_memo[key]

    def _wss(self, lam, rho, beta):
        v = self._z(lam, rho) - self._rx(rho) @ beta
        return float(np.sum(v * v / self.eta)), v

    def _kernel(self, name):
        pr = self.pr
        mu, V = (pr.mu_lam, pr.V_lam) if name == "lam" else (pr.mu_rho, pr.V_rho)

        def lk(x):
            if abs(x) > self.c_bound:
                return -np.inf
            lam, rho = (x, self.rho) if name == "lam" else (self.lam, x)
            w, _ = self._wss(lam, rho, self.beta)
            return -0.5 * (w / self.s2 + (x * x - 2 * mu * x) / V)

        return lk

    def sweep(self, adapt: bool):
        rng = self.rng
        RX = self._rx(self.rho)
        Z = self._z(self.lam, self.rho)
        if "beta" not in self.fixed:
            RXh = RX / self.eta[:, None]
            K = np.linalg.inv(self.Vb_inv + RX.T @ RXh / self.s2)
            K = 0.5 * (K + K.T)
            mean = K @ (RXh.T @ Z / self.s2 + self.Vb_inv @ self.pr.mu_beta)
            self.beta = rng.multivariate_normal(mean, K, method="cholesky")
        if "sigma2" not in self.fixed:
            w, _ = self._wss(self.lam, self.rho, self.beta)
            shape, scale = self.pr.a + 0.5 * self.prof.data.n, self.pr.b + 0.5 * w
            self.s2 = scale / rng.gamma(shape)
        for name in ("lam", "rho"):
            if name in self.fixed:
                continue
            val, ok, _ = rw_mh_step(getattr(self, name), self._kernel(name), self.c[name], rng)
            setattr(self, name, val)
            self.acc[name] += ok
            self.win[name] += ok
        if self.hetero:
            _, v = self._wss(self.lam, self.rho, self.beta)
            if "eta" not in self.fixed:
                shape = 0.5 * (self.nu + 1)
                scale = 0.5 * self.nu + v**2 / (2 * self.s2)
                self.eta = scale / rng.gamma(shape, size=v.size)
            if "nu" not in self.fixed:
                self.nu = griddy_gibbs_nu(self.eta, self.pr.nu_bar, self.grid_size, rng)

    def calibrate(self):
        """Reset each step size to 2.4 conditional SDs from the kernel's curvature."""
        for name in ("lam", "rho"):
            if name in self.fixed:
                continue
            lk, x, h = self._kernel(name), getattr(self, name), 1e-3
            d2 = (lk(x + h) - 2 * lk(x) + lk(x - h)) / h**2
            if np.isfinite(d2) and d2 < 0:
                self.c[name] = 2.4 / math.sqrt(-d2)

    def adapt(self):
        lo, hi = TARGET_BAND
        for name in ("lam", "rho"):
            rate = self.win[name] / TUNE_EVERY
            if rate > hi:
                self.c[name] *= TUNE_FACTOR
            elif rate < lo:
                self.c[name] /= TUNE_FACTOR
            self.win[name] = 0

    def row(self):
        out = list(self.beta)
        if "lam" not in self.fixed:
            out.append(self.lam)
        if "rho" not in self.fixed:
            out.append(self.rho)
        if "sigma2" not in self.fixed:
            out.append(self.s2)
        if self.hetero and "nu" not in self.fixed:
            out.append(self.nu)
        return out

    def names(self):
        k = self.beta.size
        nm = [f"beta{j + 1}" for j in range(k)]
        nm += [x for x, key in (("lambda", "lam"), ("rho", "rho"), ("sigma2", "sigma2"))
               if key not in self.fixed]
        if self.hetero and "nu" not in self.fixed:
            nm.append("nu")
        return nm


def _run(data, priors, n_draws, burn, seed, hetero, fixed, c_bound, grid_size, init,
         profile, store_eta=False, rep=0):
    if burn >= n_draws:
        raise ValueError("burn must be smaller than n_draws")
    prof = profile or Profile(data, c_bound)
    rng = rng_for(seed, rep, 7)
    s = _Sampler(prof, priors, rng, hetero, fixed or {}, c_bound, grid_size, init)
    rows, etas = [], []
    for it in range(n_draws):
        s.sweep(adapt=it < burn)
        if it < burn and (it + 1) % TUNE_EVERY == 0:
            if it + 1 == TUNE_EVERY:
                s.calibrate()
            else:
                s.adapt()
        if it == burn - 1 or (burn == 0 and it == 0):
            s.acc = {"lam": 0, "rho": 0}
        if it >= burn:
            rows.append(s.row())
            if store_eta:
                etas.append(s.eta.copy())
    kept = n_draws - burn
    return Chain(
        draws=np.array(rows),
        names=s.names(),
        acceptance_lam=s.acc["lam"] / kept if "lam" not in s.fixed else float("nan"),
        acceptance_rho=s.acc["rho"] / kept if "rho" not in s.fixed else float("nan"),
        c_lam=s.c["lam"],
        c_rho=s.c["rho"],
        burn=burn,
        eta=np.array(etas) if store_eta else None,
        fixed=dict(fixed or {}),
        info=dict(hetero=hetero, seed=seed, n_draws=n_draws, c_bound=c_bound),
    )


def gibbs_homo(data: MessData, priors: Priors | None = None, n_draws: int = 1500,
               burn: int = 500, seed: int = 0, fixed: dict | None = None,
               c_bound: float = C_BOUND, init: dict | None = None,
               profile: Profile | None = None, rep: int = 0) -> Chain:
    """Homoskedastic sampler; ``n_draws`` counts all iterations, the first ``burn`` dropped.

    ``fixed`` may pin any of lam, rho, sigma2 (and beta) at given values.
    Proposals outside (-c_bound, c_bound) are rejected, so the spatial
    priors are effectively truncated there.
    """
    priors = priors or Priors.default(data.k)
    return _run(data, priors, n_draws, burn, seed, False, fixed, c_bound, 97, init, profile, rep=rep)


def gibbs_hetero(data: MessData, priors: Priors | None = None, n_draws: int = 1500,
                 burn: int = 500, seed: int = 0, fixed: dict | None = None,
                 c_bound: float = C_BOUND, grid_size: int = 97, init: dict | None = None,
                 profile: Profile | None = None, store_eta: bool = True, rep: int = 0) -> Chain:
    """Scale-mixture sampler; ``fixed`` may also pin eta (forcing all eta = 1) or nu."""
    priors = priors or Priors.default(data.k)
    return _run(data, priors, n_draws, burn, seed, True, fixed, c_bound, grid_size, init,
                profile, store_eta=store_eta, rep=rep)


def geweke_joint_test(W, M, X, priors: Priors, n_iter: int = 4000, seed: int = 0,
                      c_bound: float = 2.0, thin_batches: int = 40):
    """Successive-conditional simulator: alternate a posterior sweep with a fresh Y.

    Returns (names, simulated moments, batch-means standard errors, prior
    moments) for the first and second moments of (beta, lam, rho).
    Correct samplers leave the prior marginals invariant.
    """
    from . import model_core as mc

    rng = rng_for(seed, 99)
    k = X.shape[1]
    lam = rng.normal(priors.mu_lam, math.sqrt(priors.V_lam))
    rho = rng.normal(priors.mu_rho, math.sqrt(priors.V_rho))
    beta = rng.multivariate_normal(priors.mu_beta, priors.V_beta)
    s2 = priors.b / rng.gamma(priors.a)

    def draw_y(beta, lam, rho, s2):
        v = math.sqrt(s2) * rng.standard_normal(X.shape[0])
        from . import expm as ex

        u = ex.expm_action(M, -rho, v)
        return ex.expm_action(W, -lam, X @ beta + u)

    out = []
    c = None
    for it in range(n_iter):
        Y = draw_y(beta, lam, rho, s2)
        data = mc.MessData(Y, X, W, M)
        prof = Profile(data, c_bound)
        s = _Sampler(prof, priors, rng, False, {}, c_bound, 97,
                     dict(lam=lam, rho=rho, sigma2=s2, beta=beta))
        if c is not None:
            s.c = dict(c)
        s.sweep(adapt=False)
        c = s.c
        beta, lam, rho, s2 = s.beta, s.lam, s.rho, s.s2
        th = np.r_[beta, lam, rho]
        out.append(np.r_[th, th**2])
    out = np.array(out)
    B = thin_batches
    m = out.shape[0] // B
    batches = out[: m * B].reshape(B, m, -1).mean(axis=1)
    se = batches.std(axis=0, ddof=1) / math.sqrt(B)
    mu = np.r_[priors.mu_beta, priors.mu_lam, priors.mu_rho]
    var = np.r_[np.diag(priors.V_beta), priors.V_lam, priors.V_rho]
    names = [f"beta{j + 1}" for j in range(k)] + ["lambda", "rho"]
    names = names + [nm + "^2" for nm in names]
    return names, out.mean(axis=0), se, np.r_[mu, var + mu**2]
