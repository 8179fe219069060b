"""
Monte Carlo replication engine: simulate, fit and summarize bias, RMSE and
95% interval coverage per (parameter, estimator), plus comparison against
the shipped reference tables.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from ._profile import Profile
from .model_core import C_BOUND, DisturbanceScheme, make_design, simulate
from .weights import GridSpec, build_grid_contiguity, build_knn, grid_coordinates

CLASSICAL = ("qmle", "me", "igmme", "bgmme", "rgmme")
BAYESIAN = ("be", "rbe")
ESTIMATORS = CLASSICAL + BAYESIAN
TRUTHS = ((-2.0, -1.0), (-2.0, 1.0), (0.5, -1.0), (0.5, 1.0))
GRIDS = {"W1": (5, 15), "W2": (14, 20)}
MAX_FAILURE_RATE = 0.05
Z95 = 1.959963984540054
FAST_FACTOR = 5


class McAbort(RuntimeError):
    """Raised when an estimator fails in more than the allowed share of replications."""

    def __init__(self, message: str, failures: dict):
        super().__init__(message)
        self.failures = failures


@dataclass(frozen=True)
class McDesign:
    """One Monte Carlo cell: weights, truth, disturbances and estimators.

    ``n_reps`` applies to classical estimators and ``n_reps_bayes`` to the
    Bayesian ones (the first ``n_reps_bayes`` replications are reused).
    """

    grid: tuple = (5, 15)
    knn: int = 5
    beta0: tuple = (1.0, 1.0)
    lam0: float = -2.0
    rho0: float = -1.0
    scheme: str = "iid_normal"
    estimators: tuple = ("qmle",)
    n_reps: int = 1000
    n_reps_bayes: int = 100
    seed: int = 0
    n_draws: int = 1500
    burn: int = 500
    scale: float = 1.0
    c_bound: float = C_BOUND

    def __post_init__(self):
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ValueError(f"unknown estimators {bad}; choose from {ESTIMATORS}")
        if self.n_reps < 1 or self.n_reps_bayes < 0:
            raise ValueError("replication counts must be positive")
        DisturbanceScheme(self.scheme)
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "beta0", tuple(float(b) for b in self.beta0))
        object.__setattr__(self, "estimators", tuple(self.estimators))

    def fast(self) -> "McDesign":
        """Same design with both replication counts divided by five."""
        return McDesign(**{**self.__dict__, "n_reps": max(self.n_reps // FAST_FACTOR, 1),
                           "n_reps_bayes": max(self.n_reps_bayes // FAST_FACTOR, 1)})

    def reps_for(self, estimator: str) -> int:
        return min(self.n_reps_bayes, self.n_reps) if estimator in BAYESIAN else self.n_reps

    def param_names(self) -> list:
        return [f"beta{j + 1}" for j in range(len(self.beta0))] + ["lambda", "rho"]

    def truth(self) -> np.ndarray:
        return np.array([*self.beta0, self.lam0, self.rho0])

    def build(self):
        """(W, M, X) shared by all replications; X is drawn once from the design seed."""
        spec = GridSpec(*self.grid)
        W = build_grid_contiguity(spec)
        M = build_knn(grid_coordinates(spec)[0], self.knn)
        X = make_design(W.n, self.seed)
        if len(self.beta0) != X.shape[1]:
            raise ValueError("beta0 must have one entry per regressor (two)")
        return W, M, X


def preset(table: str, weights: str, lam0: float, rho0: float, **kw) -> McDesign:
    """Design matching a reference-table block ("table1".."table4", "W1"/"W2")."""
    ref = load_reference()["tables"][table]
    return McDesign(grid=GRIDS[weights], lam0=lam0, rho0=rho0, scheme=ref["scheme"],
                    estimators=tuple(kw.pop("estimators", ref["estimators"])), **kw)


@dataclass
class Cell:
    bias: float
    rmse: float
    coverage: float
    n: int
    se_bias: float

    def to_dict(self) -> dict:
        return dict(bias=self.bias, rmse=self.rmse, coverage=self.coverage, n=self.n,
                    se_bias=self.se_bias)


@dataclass
class McTable:
    """Summary cells keyed by (parameter, estimator) plus failure counts."""

    cells: dict
    failures: dict
    attempted: dict
    design: dict = field(default_factory=dict)

    def get(self, param: str, estimator: str) -> Cell:
        return self.cells[(param, estimator)]

    def to_dict(self) -> dict:
        return dict(design=self.design, failures=dict(self.failures),
                    attempted=dict(self.attempted),
                    cells=[dict(param=p, estimator=e, **c.to_dict())
                           for (p, e), c in sorted(self.cells.items())])

    def to_text(self) -> str:
        ests = sorted({e for _, e in self.cells}, key=lambda e: ESTIMATORS.index(e))
        params = sorted({p for p, _ in self.cells}, key=lambda p: (p[:4] != "lamb", p[:3] != "rho", p))
        lines = ["param     " + "".join(f"{e:>28s}" for e in ests)]
        for p in params:
            row = f"{p:10s}"
            for e in ests:
                c = self.cells.get((p, e))
                row += f"{'':>28s}" if c is None else f"{c.bias:>10.4f}({c.rmse:.3f})[{c.coverage:.3f}]"
            lines.append(row)
        lines.append("failures: " + ", ".join(f"{e}={self.failures[e]}/{self.attempted[e]}" for e in ests))
        return "\n".join(lines)


def _fit_one(est, data, design, rep, prof, cache):
    """(estimates, lower, upper, ok) in (beta, lambda, rho) order."""
    from . import bayes, gmm, m_est, qmle

    hetero = design.scheme.startswith("hetero")
    c = design.c_bound

    def get_qmle():
        if "qmle" not in cache:
            cache["qmle"] = qmle.fit_qmle(data, c, vcov="hetero" if hetero else "homo", profile=prof)
        return cache["qmle"]

    if est in BAYESIAN:
        sampler = bayes.gibbs_hetero if est == "rbe" else bayes.gibbs_homo
        ch = sampler(data, bayes.Priors.default(data.k), n_draws=design.n_draws, burn=design.burn,
                     seed=design.seed, c_bound=c, profile=prof, rep=rep)
        idx = [ch.names.index(nm) for nm in design.param_names()]
        iv = ch.interval(0.95)[idx]
        return ch.mean()[idx], iv[:, 0], iv[:, 1], True
    if est == "qmle":
        fit = get_qmle()
    elif est == "me":
        q = get_qmle()
        fit = m_est.fit_m(data, start=(q.params.lam, q.params.rho), c_bound=c)
    elif est == "igmme":
        if "igmme" not in cache:
            cache["igmme"] = gmm.fit_igmme(data, start=get_qmle().params.as_array(), c_bound=c,
                                           profile=prof)
        fit = cache["igmme"]
    elif est == "bgmme":
        fit = gmm.fit_bgmme(data, initial=get_qmle(), c_bound=c, profile=prof)
    else:
        if "igmme" not in cache:
            cache["igmme"] = gmm.fit_igmme(data, start=get_qmle().params.as_array(), c_bound=c,
                                           profile=prof)
        fit = gmm.fit_rgmme(data, initial=cache["igmme"], c_bound=c, profile=prof)
    est_v = fit.params.as_array()
    se = fit.se
    ok = bool(fit.converged) and se is not None and np.all(np.isfinite(se)) and np.all(np.isfinite(est_v))
    if se is None:
        se = np.full_like(est_v, np.nan)
    return est_v, est_v - Z95 * se, est_v + Z95 * se, ok


def run_replication(design: McDesign, rep: int, shared=None) -> dict:
    """All estimator results for replication ``rep``; depends only on (seed, rep)."""
    W, M, X = shared if shared is not None else design.build()
    scheme = DisturbanceScheme(design.scheme, design.scale)
    data = simulate(W, M, X, design.beta0, design.lam0, design.rho0, scheme, design.seed, rep)
    prof = Profile(data, design.c_bound)
    cache, out = {}, {}
    for est in design.estimators:
        if rep >= design.reps_for(est):
            continue
        try:
            out[est] = _fit_one(est, data, design, rep, prof, cache)
        except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            out[est] = (None, None, None, False, repr(exc))
    return out


_WORKER = {}


def _init_worker(design):
    _WORKER["design"] = design
    _WORKER["shared"] = design.build()


def _worker_rep(rep):
    return rep, run_replication(_WORKER["design"], rep, _WORKER["shared"])


def _summarize(design, results):
    names = design.param_names()
    truth = design.truth()
    cells, failures, attempted = {}, {}, {}
    for est in design.estimators:
        nr = design.reps_for(est)
        rows = [results[r][est] for r in range(nr)]
        good = [row for row in rows if row[3]]
        failures[est] = nr - len(good)
        attempted[est] = nr
        if not good:
            continue
        E = np.array([g[0] for g in good])
        L = np.array([g[1] for g in good])
        U = np.array([g[2] for g in good])
        err = E - truth
        for j, nm in enumerate(names):
            e = err[:, j]
            m = len(e)
            bias = float(np.sum(e) / m)
            rmse = float(math.sqrt(np.sum(e * e) / m))
            cov = float(np.sum((L[:, j] <= truth[j]) & (truth[j] <= U[:, j])) / m)
            sd = float(np.std(e, ddof=1)) if m > 1 else 0.0
            cells[(nm, est)] = Cell(bias, rmse, cov, m, sd / math.sqrt(m))
    return cells, failures, attempted


def run_design(design: McDesign, workers: int = 1, progress=None) -> McTable:
    """Run every replication of ``design`` and summarize per (parameter, estimator).

    Failed replications are excluded and counted; an estimator failing in more
    than 5% of its replications raises ``McAbort`` carrying the counts.
    """
    total = design.n_reps
    results = {}
    if workers <= 1:
        shared = design.build()
        for r in range(total):
            results[r] = run_replication(design, r, shared)
            if progress:
                progress(r + 1, total)
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(design,)) as pool:
            for r, res in pool.map(_worker_rep, range(total), chunksize=max(1, total // (4 * workers))):
                results[r] = res
                if progress:
                    progress(len(results), total)
    cells, failures, attempted = _summarize(design, results)
    table = McTable(cells, failures, attempted, design=_design_dict(design))
    over = {e: f for e, f in failures.items() if f > MAX_FAILURE_RATE * attempted[e]}
    if over:
        raise McAbort(f"failure rate above {MAX_FAILURE_RATE:.0%}: "
                      + ", ".join(f"{e} {f}/{attempted[e]}" for e, f in over.items()), failures)
    return table


def _design_dict(design: McDesign) -> dict:
    d = dict(design.__dict__)
    d["grid"], d["beta0"], d["estimators"] = list(design.grid), list(design.beta0), list(design.estimators)
    return d


def load_reference() -> dict:
    """The shipped reference tables (bias, RMSE, coverage per cell)."""
    txt = resources.files("messpy").joinpath("data/reference_tables.json").read_text()
    return json.loads(txt)


def reference_cells(table: str, weights: str, lam0: float, rho0: float) -> dict:
    """{(param, estimator): {"bias", "rmse", "coverage"}} for one table block."""
    out = {}
    for c in load_reference()["tables"][table]["cells"]:
        if c["weights"] == weights and c["lambda0"] == lam0 and c["rho0"] == rho0:
            out[(c["param"], c["estimator"])] = {k: c[k] for k in ("bias", "rmse", "coverage")}
    if not out:
        raise KeyError(f"no reference block {table}/{weights}/({lam0}, {rho0})")
    return out


@dataclass
class Verdict:
    key: tuple
    metric: str
    value: float
    reference: float
    lower: float
    upper: float
    passed: bool


@dataclass
class CompareReport:
    verdicts: list

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    @property
    def failures(self) -> list:
        return [v for v in self.verdicts if not v.passed]

    def to_text(self) -> str:
        return "\n".join(
            f"{'PASS' if v.passed else 'FAIL'} {v.key[0]}/{v.key[1]} {v.metric}: "
            f"{v.value:.4f} in [{v.lower:.4f}, {v.upper:.4f}] (reference {v.reference:.4f})"
            for v in self.verdicts)


def _window(rule, ref):
    if "interval" in rule:
        return tuple(map(float, rule["interval"]))
    if "abs" in rule:
        return ref - rule["abs"], ref + rule["abs"]
    if "rel" in rule:
        return ref - rule["rel"] * abs(ref), ref + rule["rel"] * abs(ref)
    raise ValueError(f"tolerance rule needs one of interval/abs/rel, got {rule}")


def compare_to_reference(table: McTable, reference: dict, tolerances: dict) -> CompareReport:
    """Per-cell verdicts for every reference cell and every metric in ``tolerances``.

    ``reference`` maps (param, estimator) to metric values; ``tolerances``
    maps a metric to {"abs": a}, {"rel": r} or {"interval": [lo, hi]}.
    """
    if not tolerances:
        raise ValueError("empty tolerance map")
    missing = [k for k in reference if k not in table.cells]
    if missing:
        raise KeyError(f"reference cells absent from the table: {missing}")
    verdicts = []
    for key in sorted(reference):
        cell = table.cells[key]
        for metric, rule in tolerances.items():
            if metric not in reference[key]:
                raise KeyError(f"reference cell {key} lacks metric {metric!r}")
            ref = float(reference[key][metric])
            val = float(getattr(cell, metric))
            lo, hi = _window(rule, ref)
            verdicts.append(Verdict(key, metric, val, ref, lo, hi, bool(lo <= val <= hi)))
    return CompareReport(verdicts)
