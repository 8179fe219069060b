"""
The MESS(1,1) problem: data bundle, parameters, residual map,
disturbance schemes and simulation.

    e^{lam W} Y = X beta + U,   e^{rho M} U = V
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import expm as ex
from .weights import WeightsMatrix, neighbor_counts, read_mtx, write_mtx

C_BOUND = 5.0
SCHEMES = ("iid_normal", "std_chisq3", "hetero_neighbors", "hetero_exp_x2")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class MessData:
    Y: np.ndarray
    X: np.ndarray
    W: WeightsMatrix
    M: WeightsMatrix

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = Y.shape[0]
        if X.shape[0] != n or self.W.n != n or self.M.n != n:
            raise DataError(
                f"dimension mismatch: Y {n}, X {X.shape}, W {self.W.n}, M {self.M.n}"
            )
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    def check_rank(self, tol: float = 1e-10) -> None:
        s = np.linalg.svd(self.X, compute_uv=False)
        if s[-1] <= tol * s[0]:
            raise DataError("X is numerically rank deficient")

    def with_y(self, Y) -> "MessData":
        return MessData(Y, self.X, self.W, self.M)


@dataclass(frozen=True)
class ParamVector:
    beta: np.ndarray
    lam: float
    rho: float
    sigma2: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "rho", float(self.rho))

    def in_bounds(self, c_bound: float = C_BOUND) -> bool:
        return abs(self.lam) <= c_bound and abs(self.rho) <= c_bound

    def as_array(self) -> np.ndarray:
        """Stacked (beta, lam, rho)."""
        return np.concatenate([self.beta, [self.lam, self.rho]])

    @classmethod
    def from_array(cls, g, sigma2=None) -> "ParamVector":
        g = np.asarray(g, dtype=float)
        return cls(g[:-2], g[-2], g[-1], sigma2)


@dataclass(frozen=True)
class DisturbanceScheme:
    tag: str = "iid_normal"
    scale: float = 1.0
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in SCHEMES:
            raise ValueError(f"unknown disturbance scheme {self.tag!r}; choose from {SCHEMES}")

    def variances(self, W: WeightsMatrix, X: np.ndarray) -> np.ndarray:
        """Per-unit variances before the overall scale factor."""
        n = W.n
        if self.tag in ("iid_normal", "std_chisq3"):
            return np.ones(n)
        if self.tag == "hetero_neighbors":
            counts = neighbor_counts(self.params.get("W_counts", W))
            return 2.0 * counts / counts.mean()
        x2 = X[:, self.params.get("column", 1)]
        return np.exp(0.1 + 0.35 * x2)

    def draw(self, rng: np.random.Generator, W: WeightsMatrix, X: np.ndarray) -> np.ndarray:
        n = W.n
        if self.tag == "std_chisq3":
            v = (rng.chisquare(3, size=n) - 3.0) / math.sqrt(6.0)
        else:
            v = rng.standard_normal(n) * np.sqrt(self.variances(W, X))
        return self.scale * v


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, *keys)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def residuals(data: MessData, p: ParamVector, policy=ex.DEFAULT_POLICY) -> np.ndarray:
    """V(gamma) = e^{rho M}(e^{lam W} Y - X beta)."""
    SY = ex.expm_action(data.W, p.lam, data.Y, policy)
    return ex.expm_action(data.M, p.rho, SY - data.X @ p.beta, policy)


def simulate(
    W: WeightsMatrix,
    M: WeightsMatrix,
    X,
    beta0,
    lam0: float,
    rho0: float,
    scheme: DisturbanceScheme = DisturbanceScheme(),
    seed: int = 0,
    rep: int = 0,
    return_v: bool = False,
    policy=ex.DEFAULT_POLICY,
):
    """Y = e^{-lam0 W} X beta0 + e^{-lam0 W} e^{-rho0 M} V."""
    X = np.asarray(X, dtype=float)
    V = scheme.draw(rng_for(seed, rep), W, X)
    U = ex.expm_action(M, -rho0, V, policy)
    Y = ex.expm_action(W, -lam0, X @ np.asarray(beta0, dtype=float) + U, policy)
    data = MessData(Y, X, W, M)
    return (data, V) if return_v else data


def make_design(n: int, seed: int = 0) -> np.ndarray:
    """Two regressors: standard normal and Uniform(0, sqrt(12))."""
    rng = rng_for(seed, 10**6)
    x1 = rng.standard_normal(n)
    x2 = rng.uniform(0.0, math.sqrt(12.0), n)
    return np.column_stack([x1, x2])


def sample_moments(v: np.ndarray) -> tuple[float, float, float]:
    """Raw second, third and fourth moments of residuals (no centring)."""
    v = np.asarray(v, dtype=float)
    return float(np.mean(v**2)), float(np.mean(v**3)), float(np.mean(v**4))


def write_data(data: MessData, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    header = ",".join(["y"] + [f"x{j + 1}" for j in range(data.k)])
    np.savetxt(d / "data.csv", np.column_stack([data.Y, data.X]), delimiter=",",
               header=header, comments="", fmt="%.17g")
    write_mtx(data.W, d / "W.mtx")
    write_mtx(data.M, d / "M.mtx")


def read_table(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    try:
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if arr.shape[1] < 2:
        raise DataError(f"{path} needs a y column and at least one x column")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path} contains non-finite values")
    return arr[:, 0], arr[:, 1:]


def read_data(directory) -> MessData:
    d = Path(directory)
    Y, X = read_table(d / "data.csv")
    try:
        W, M = read_mtx(d / "W.mtx"), read_mtx(d / "M.mtx")
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read weights in {d}: {exc}") from exc
    return MessData(Y, X, W, M)


@dataclass
class FitResult:
    """Estimates, covariance and convergence metadata of any estimator.

    ``vcov`` is ordered like ``params.as_array()``: (beta, lam, rho).
    """

    method: str
    params: ParamVector
    vcov: np.ndarray | None = None
    residuals: np.ndarray | None = None
    objective: float = float("nan")
    converged: bool = True
    iterations: int = 0
    flags: list[str] = field(default_factory=list)
    info: dict[str, Any] = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray | None:
        if self.vcov is None:
            return None
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    def names(self) -> list[str]:
        k = self.params.beta.size
        return [f"beta{j + 1}" for j in range(k)] + ["lambda", "rho"]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "method": self.method,
            "names": self.names(),
            "estimates": self.params.as_array().tolist(),
            "sigma2": self.params.sigma2,
            "objective": self.objective,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "flags": list(self.flags),
        }
        if self.vcov is not None:
            out["se"] = self.se.tolist()
            out["vcov"] = np.asarray(self.vcov).tolist()
        for key, val in self.info.items():
            out[key] = val.tolist() if isinstance(val, np.ndarray) else val
        return out
