"""
Average direct, indirect and total impacts of e^{-lam W} beta_k with
delta-method or posterior standard errors.

All four scalar functions of lam that appear (traces of e^{-lam W} and
e^{-lam W} W, and the matching bilinear forms in the ones vector) are power
series in lam whose coefficients tr(W^j) and l'W^j l are computed once per W.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import expm as ex
from .model_core import C_BOUND, FitResult
from .weights import WeightsMatrix, validate

N_PROBES = 64
PROBE_SEED = 20240917


class _Moments:
    """tr(W^j) and l'W^j l for j = 0..q+1 (exact probes or Hutchinson)."""

    def __init__(self, W, c_bound: float, n_probes: int = N_PROBES, seed: int = PROBE_SEED):
        Wc = ex._as_csr(W)
        n = Wc.shape[0]
        norm = max(validate(W).row_sum_norm if isinstance(W, WeightsMatrix) else ex._inf_norm(Wc), 1e-12)
        self.q = ex.series_order(c_bound * norm, 1e-15, q_cap=150)
        self.n = n
        self.exact = n <= ex.DENSE_LIMIT
        if self.exact:
            P = np.eye(n)
        else:
            rng = np.random.default_rng(seed)
            P = rng.choice([-1.0, 1.0], size=(n, n_probes))
        Z = P.copy()
        u = np.ones(n)
        tr, lw = [], []
        # per-probe quadratic forms z'W^j z, summed for exact probes
        per_probe = []
        for _ in range(self.q + 2):
            qf = np.einsum("ij,ij->j", P, Z)
            per_probe.append(qf)
            lw.append(float(u.sum()))
            Z = Wc @ Z
            u = Wc @ u
        per_probe = np.array(per_probe)            # (q+2, probes)
        if self.exact:
            self.tr = per_probe.sum(axis=1)
            self.probes = None
        else:
            self.tr = per_probe.mean(axis=1)
            self.probes = per_probe
        self.lw = np.array(lw)

    def _coef(self, lam: float) -> np.ndarray:
        j = np.arange(self.q + 1)
        return np.array([(-lam) ** i / math.factorial(i) for i in j])

    def values(self, lam: float):
        """(tr e^{-lam W}, tr e^{-lam W}W, l'e^{-lam W}l, l'e^{-lam W}Wl)."""
        c = self._coef(lam)
        return (float(c @ self.tr[:-1]), float(c @ self.tr[1:]),
                float(c @ self.lw[:-1]), float(c @ self.lw[1:]))

    def trace_se(self, lam: float) -> float:
        """Monte Carlo SE of the stochastic estimate of tr e^{-lam W} (0 when exact)."""
        if self.probes is None:
            return 0.0
        est = self._coef(lam) @ self.probes[:-1]
        return float(est.std(ddof=1) / math.sqrt(est.size))


@functools.lru_cache(maxsize=16)
def _moments(W, c_bound: float) -> _Moments:
    return _Moments(W, c_bound)


def _get(W, c_bound):
    try:
        return _moments(W, float(c_bound))
    except TypeError:  # unhashable input
        return _Moments(W, float(c_bound))


@dataclass
class ImpactSummary:
    """Per-regressor impacts; arrays indexed like ``regressors``."""

    regressors: list
    adi: np.ndarray
    aii: np.ndarray
    ati: np.ndarray
    se_adi: np.ndarray
    se_aii: np.ndarray
    se_ati: np.ndarray
    method: str
    flags: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"method": self.method, "flags": list(self.flags), "impacts": []}
        for j, k in enumerate(self.regressors):
            out["impacts"].append({
                "regressor": int(k),
                **{nm: float(getattr(self, nm)[j])
                   for nm in ("adi", "aii", "ati", "se_adi", "se_aii", "se_ati")},
            })
        return out


def _point(m: _Moments, lam: float, bk: float):
    tr0, _, lel, _ = m.values(lam)
    n = m.n
    adi = tr0 * bk / n
    ati = bk * lel / n
    return adi, ati - adi, ati


def impact_point(fit: FitResult, W, k: int, c_bound: float = C_BOUND):
    """(adi, aii, ati) for regressor ``k`` (0-based column of beta)."""
    p = fit.params
    return _point(_get(W, c_bound), p.lam, float(p.beta[k]))


def _gradients(m: _Moments, lam: float, bk: float):
    tr0, tr1, lel, lewl = m.values(lam)
    n = m.n
    A1 = np.array([-tr1 * bk / n, tr0 / n])
    A2 = np.array([-bk * lewl / n, lel / n])
    return A1, A2


def impact_se_delta(fit: FitResult, W, k: int, c_bound: float = C_BOUND, vcov=None):
    """Delta-method SEs (adi, aii, ati) and a flag set when the (lam, beta_k) block is not PSD.

    ``vcov`` overrides fit.vcov; it is the finite-sample covariance, i.e. B/n.
    """
    vc = fit.vcov if vcov is None else vcov
    if vc is None:
        raise ValueError("fit has no covariance matrix")
    kb = fit.params.beta.size
    idx = [kb, k]
    Bn = np.asarray(vc)[np.ix_(idx, idx)]
    not_psd = bool(np.min(np.linalg.eigvalsh(0.5 * (Bn + Bn.T))) < -1e-12 * max(1.0, np.abs(Bn).max()))
    A1, A2 = _gradients(_get(W, c_bound), fit.params.lam, float(fit.params.beta[k]))
    se = tuple(math.sqrt(max(float(a @ Bn @ a), 0.0)) for a in (A1, A2 - A1, A2))
    return se, not_psd


def _regressors(X, kb):
    if X is None:
        return list(range(kb))
    X = np.asarray(X)
    return [j for j in range(kb) if not np.allclose(X[:, j], X[0, j])]


def impact_summary(fit: FitResult, W, X=None, c_bound: float = C_BOUND) -> ImpactSummary:
    """Delta-method impacts for every non-constant regressor of ``X`` (all when X is None)."""
    m = _get(W, c_bound)
    ks = _regressors(X, fit.params.beta.size)
    rows, ses, flags = [], [], []
    for k in ks:
        rows.append(impact_point(fit, W, k, c_bound))
        se, bad = impact_se_delta(fit, W, k, c_bound)
        ses.append(se)
        if bad:
            flags.append(f"vcov_not_psd:{k}")
    rows, ses = np.array(rows).reshape(-1, 3), np.array(ses).reshape(-1, 3)
    return ImpactSummary(ks, rows[:, 0], rows[:, 1], rows[:, 2], ses[:, 0], ses[:, 1],
                         ses[:, 2], "delta", flags,
                         info=dict(trace_se=m.trace_se(fit.params.lam), exact_trace=m.exact))


def impact_draws(chain, W, k: int, c_bound: float = C_BOUND) -> np.ndarray:
    """Per-draw (adi, aii, ati), shape (R, 3)."""
    m = _get(W, c_bound)
    lam = chain.column("lambda") if "lambda" in chain.names else np.full(len(chain.draws), chain.fixed.get("lam", 0.0))
    bk = chain.column(f"beta{k + 1}")
    return np.array([_point(m, float(l), float(b)) for l, b in zip(lam, bk)])


def impact_posterior(chain, W, k: int | None = None, X=None, c_bound: float = C_BOUND) -> ImpactSummary:
    """Posterior means and SDs of the impacts for regressor ``k`` (or all non-constant ones)."""
    ks = [k] if k is not None else _regressors(X, chain.k)
    means, sds = [], []
    for kk in ks:
        d = impact_draws(chain, W, kk, c_bound)
        means.append(d.mean(axis=0))
        sds.append(d.std(axis=0, ddof=1) if len(d) > 1 else np.zeros(3))
    means, sds = np.array(means), np.array(sds)
    return ImpactSummary(ks, means[:, 0], means[:, 1], means[:, 2], sds[:, 0], sds[:, 1],
                         sds[:, 2], "posterior")
