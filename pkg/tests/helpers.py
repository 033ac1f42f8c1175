"""Small builders shared by the test modules."""
from __future__ import annotations

import math

import numpy as np

from bplnlc.model import ModelState


def zero_state(n: int = 1, M: int = 3, N: int = 4, **overrides) -> ModelState:
    """Valid state with flat loadings, zero paths and unit variances."""
    fields = dict(
        alpha=np.zeros((n, M)), beta=np.full(M, 1.0 / M), beta_pop=np.full((n, M), 1.0 / math.sqrt(M)),
        sigma2_beta=1.0, sigma2_beta_pop=np.ones(n), kappa=np.zeros(N), kappa_pop=np.zeros((n, N)),
        phi=np.zeros(2), phi_pop=np.zeros((n, 2)), rho=0.0, rho_pop=np.zeros(n), sigma2_kappa=1.0,
        sigma2_kappa_pop=np.ones(n), w=np.zeros((n, 2), dtype=np.int8), p=np.full(n, 0.5),
        nu=np.zeros((n, M, N)), sigma2_nu=np.ones(n),
    )
    fields.update(overrides)
    return ModelState(**fields)


def random_state(rng: np.random.Generator, n: int = 2, M: int = 4, N: int = 6) -> ModelState:
    """Random state satisfying every constraint."""
    beta = rng.uniform(0.2, 1.0, M)
    beta /= beta.sum()
    bp = rng.uniform(0.2, 1.0, (n, M))
    bp /= np.linalg.norm(bp, axis=1, keepdims=True)
    kappa = rng.normal(size=N)
    kappa -= kappa.mean()
    kp = rng.normal(size=(n, N))
    kp -= kp.mean(axis=1, keepdims=True)
    w = rng.integers(0, 2, (n, 2)).astype(np.int8)
    return zero_state(
        n, M, N, alpha=rng.normal(-4, 1, (n, M)), beta=beta, beta_pop=bp, kappa=kappa, kappa_pop=kp,
        phi=rng.normal(size=2), phi_pop=rng.normal(size=(n, 2)) * w, w=w, rho=rng.uniform(-0.9, 0.9),
        rho_pop=rng.uniform(-0.9, 0.9, n), nu=rng.normal(0, 0.1, (n, M, N)), sigma2_kappa=rng.uniform(0.1, 2),
        sigma2_kappa_pop=rng.uniform(0.1, 2, n), sigma2_nu=rng.uniform(0.01, 0.1, n),
    )


def dense_precision(rho: float, N: int) -> np.ndarray:
    """Q = U'U built by an explicit dense product."""
    U = np.eye(N)
    for t in range(1, N):
        U[t, t - 1] = -rho
    return U.T @ U
