"""Estimation, inference, simulation and model selection for matrix
exponential spatial models with an outcome term e^{lam W} and a
disturbance term e^{rho M}."""

__version__ = "0.1.0"
