"""Fast evaluation of residuals and concentrated objectives from precomputed bases."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expm as ex
from ._lq import dense
from .model_core import C_BOUND, MessData, ParamVector
from .weights import validate


def basis_order(data: MessData, c_bound: float = C_BOUND, tol: float = 1e-13) -> int:
    c = c_bound * max(validate(data.W).row_sum_norm, validate(data.M).row_sum_norm, 1e-12)
    return min(ex.series_order(c, tol), 45)


class Profile:
    """Residual map V(beta, lam, rho) with beta optionally concentrated out."""

    def __init__(self, data: MessData, c_bound: float = C_BOUND, q: int | None = None):
        self.data = data
        self.c_bound = c_bound
        self.q = basis_order(data, c_bound) if q is None else q
        self.basis = ex.precompute_bases(data.W, data.M, data.Y, data.X, self.q)

    def Z(self, lam, rho, dlam=0, drho=0):
        """e^{rho M} e^{lam W} Y and its partial derivatives."""
        return ex.pair_action(self.basis, lam, rho, dlam, drho)

    def RX(self, rho, drho=0):
        return ex.x_action(self.basis, rho, drho)

    def beta(self, lam, rho):
        return self.resid(lam, rho)[1]

    def resid(self, lam, rho, beta=None):
        Z, RX = self.Z(lam, rho), self.RX(rho)
        if beta is None:
            beta = np.linalg.lstsq(RX, Z, rcond=None)[0]
        return Z - RX @ beta, beta

    def Qc(self, lam, rho):
        v, _ = self.resid(lam, rho)
        return float(v @ v)

    def grad_Qc(self, lam, rho):
        """Gradient of the concentrated sum of squares (envelope theorem)."""
        v, b = self.resid(lam, rho)
        dl = self.Z(lam, rho, dlam=1)
        dr = self.Z(lam, rho, drho=1) - self.RX(rho, drho=1) @ b
        return np.array([2 * v @ dl, 2 * v @ dr])


@dataclass
class DensePieces:
    """Dense matrices at a parameter point for closed-form inference."""

    R: np.ndarray        # e^{rho M}
    Rinv: np.ndarray     # e^{-rho M}
    Wd: np.ndarray
    Md: np.ndarray
    Wbb: np.ndarray      # e^{rho M} W e^{-rho M}
    RX: np.ndarray
    RXb: np.ndarray      # e^{rho M} X beta
    WRXb: np.ndarray     # Wbb e^{rho M} X beta
    SY: np.ndarray       # e^{lam W} Y
    V: np.ndarray


def dense_pieces(data: MessData, p: ParamVector, policy=ex.DEFAULT_POLICY) -> DensePieces:
    R = ex.expm_dense_via_action(data.M, p.rho, policy)
    Rinv = ex.expm_dense_via_action(data.M, -p.rho, policy)
    Wd, Md = dense(data.W), dense(data.M)
    Wbb = R @ (Wd @ Rinv)
    RX = R @ data.X
    RXb = RX @ p.beta
    SY = ex.expm_action(data.W, p.lam, data.Y, policy)
    V = R @ (SY - data.X @ p.beta)
    return DensePieces(R, Rinv, Wd, Md, Wbb, RX, RXb, Wbb @ RXb, SY, V)
