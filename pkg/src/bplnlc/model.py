"""Parameter state, prior constants, Poisson likelihood and AR(1)-with-drift algebra.

Model (per population i, age x, year t)::

    D ~ Poisson(E * mu),  log mu = alpha_x^i + beta_x kappa_t + beta_x^i kappa_t^i + nu_xt^i
    kappa   ~ N(W phi,   s2_kappa   Q(rho)^-1)
    kappa^i ~ N(W phi^i, s2_kappa^i Q(rho^i)^-1)

with ``W`` the (1, year) design and ``Q = U'U`` for the unit lower-bidiagonal
``U`` carrying ``-rho`` on its subdiagonal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import MortalityDataset

LOG_MU_MAX = 700.0
LOG_2PI = math.log(2.0 * math.pi)


def _as_pop(value, n: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    return np.broadcast_to(arr, (n,)).copy() if arr.ndim <= 1 else arr


@dataclass(frozen=True)
class Hyperparams:
    """Prior constants. Defaults are the reference values for the Japan analysis.

    Scalar entries for population-level constants apply to every population;
    a sequence gives one value per population. ``a_x``/``b_x`` may also be
    given per (population, age).
    """

    a_x: float | Sequence = 1.0
    b_x: float | Sequence = 1.0
    a_beta: float = 0.01
    b_beta: float = 0.01
    a_beta_pop: float | Sequence[float] = 0.001
    b_beta_pop: float | Sequence[float] = 0.001
    phi0: Sequence[float] = (0.0, 0.0)
    sigma0: Sequence[Sequence[float]] = ((10.0, 0.0), (0.0, 10.0))
    sigma2_rho: float = 1.0
    sigma2_rho_pop: float | Sequence[float] = 0.1
    a_kappa: float = 0.001
    b_kappa: float = 0.001
    a_kappa_pop: float | Sequence[float] = 0.001
    b_kappa_pop: float | Sequence[float] = 0.001
    a_mu: float | Sequence[float] = 2.5
    b_mu: float | Sequence[float] = 2.5
    a_p: float = 1.0
    b_p: float = 1.0
    # slab variance multiplier c_l for (intercept, slope); the reference
    # analysis never states a value, 10 mirrors the diagonal of sigma0
    slab_scale: Sequence = (10.0, 10.0)
    inclusion_threshold: float = 0.5

    def __post_init__(self):
        for name in (
            "a_x", "b_x", "a_beta", "b_beta", "a_beta_pop", "b_beta_pop", "sigma2_rho",
            "sigma2_rho_pop", "a_kappa", "b_kappa", "a_kappa_pop", "b_kappa_pop",
            "a_mu", "b_mu", "a_p", "b_p", "slab_scale",
        ):
            if np.any(~(np.asarray(getattr(self, name), dtype=float) > 0)):
                raise ValueError(f"hyperparameter {name} must be strictly positive")
        if np.asarray(self.phi0, dtype=float).shape != (2,):
            raise ValueError("phi0 must have length 2")
        s0 = np.asarray(self.sigma0, dtype=float)
        if s0.shape != (2, 2) or not np.allclose(s0, s0.T):
            raise ValueError("sigma0 must be a symmetric 2x2 matrix")
        if np.any(np.linalg.eigvalsh(s0) <= 0):
            raise ValueError("sigma0 must be positive definite")
        if not 0.0 < self.inclusion_threshold < 1.0:
            raise ValueError("inclusion_threshold must lie in (0, 1)")

    def age_prior(self, n: int, M: int) -> tuple[np.ndarray, np.ndarray]:
        a = np.asarray(self.a_x, dtype=float)
        b = np.asarray(self.b_x, dtype=float)
        if a.ndim == 1 and a.shape[0] == n and n != M:
            a = a[:, None]
        if b.ndim == 1 and b.shape[0] == n and n != M:
            b = b[:, None]
        return np.broadcast_to(a, (n, M)).copy(), np.broadcast_to(b, (n, M)).copy()

    def pop(self, name: str, n: int) -> np.ndarray:
        return _as_pop(getattr(self, name), n)

    def slab(self, n: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.slab_scale, dtype=float), (n, 2)).copy()

    @property
    def phi0_array(self) -> np.ndarray:
        return np.asarray(self.phi0, dtype=float)

    @property
    def sigma0_array(self) -> np.ndarray:
        return np.asarray(self.sigma0, dtype=float)

    def to_dict(self) -> dict:
        out = {}
        for key in self.__dataclass_fields__:
            value = getattr(self, key)
            out[key] = np.asarray(value, dtype=float).tolist()
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "Hyperparams":
        """Inverse of :meth:`to_dict`; unknown keys are an error."""
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        conv = {}
        for key, value in values.items():
            if isinstance(value, list):
                value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            conv[key] = value
        return cls(**conv)


@dataclass
class ModelState:
    """One point in parameter space.

    Shapes: ``alpha`` (n, M); ``beta`` (M,); ``beta_pop`` (n, M); ``kappa`` (N,);
    ``kappa_pop`` (n, N); ``phi`` (2,); ``phi_pop`` (n, 2); ``w`` (n, 2) in {0, 1};
    ``nu`` (n, M, N); per-population scalars have shape (n,).
    """

    alpha: np.ndarray
    beta: np.ndarray
    beta_pop: np.ndarray
    sigma2_beta: float
    sigma2_beta_pop: np.ndarray
    kappa: np.ndarray
    kappa_pop: np.ndarray
    phi: np.ndarray
    phi_pop: np.ndarray
    rho: float
    rho_pop: np.ndarray
    sigma2_kappa: float
    sigma2_kappa_pop: np.ndarray
    w: np.ndarray
    p: np.ndarray
    nu: np.ndarray
    sigma2_nu: np.ndarray

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    @property
    def M(self) -> int:
        return self.alpha.shape[1]

    @property
    def N(self) -> int:
        return self.kappa.shape[0]

    @property
    def e(self) -> np.ndarray:
        return np.exp(self.alpha)

    def copy(self) -> "ModelState":
        kwargs = {}
        for key in self.__dataclass_fields__:
            value = getattr(self, key)
            kwargs[key] = value.copy() if isinstance(value, np.ndarray) else value
        return ModelState(**kwargs)

    def log_mu(self) -> np.ndarray:
        return log_mu_grid(self)

    def constraint_violations(self, tol: float = 1e-10) -> list[str]:
        """Names of violated identifiability/support invariants (empty when valid)."""
        bad = []
        N = self.N
        if abs(self.beta.sum() - 1.0) > tol:
            bad.append(f"sum(beta)={self.beta.sum()!r}")
        norms = np.sqrt((self.beta_pop**2).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > tol):
            bad.append(f"||beta_pop||={norms.tolist()}")
        if abs(self.kappa.sum()) > tol * N:
            bad.append(f"sum(kappa)={self.kappa.sum()!r}")
        sums = self.kappa_pop.sum(axis=1)
        if np.any(np.abs(sums) > tol * N):
            bad.append(f"sum(kappa_pop)={sums.tolist()}")
        rhos = np.append(self.rho_pop, self.rho)
        if np.any(np.abs(rhos) >= 1.0):
            bad.append("rho outside (-1, 1)")
        variances = np.concatenate(
            [
                [self.sigma2_beta, self.sigma2_kappa],
                self.sigma2_beta_pop,
                self.sigma2_kappa_pop,
                self.sigma2_nu,
            ]
        )
        if np.any(~(variances > 0)):
            bad.append("non-positive variance")
        if np.any((self.w == 0) & (self.phi_pop != 0)):
            bad.append("phi_pop non-zero where w == 0")
        if np.any((self.p <= 0) | (self.p >= 1)):
            bad.append("p outside (0, 1)")
        return bad


@dataclass(frozen=True)
class DriftDesign:
    """Rows (1, t) over the calendar years of the training window."""

    years: np.ndarray
    W: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        years = np.asarray(self.years, dtype=float)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "W", np.column_stack([np.ones_like(years), years]))

    def eta(self, phi: Sequence[float]) -> np.ndarray:
        return phi[0] + phi[1] * self.years

    @property
    def mean_time(self) -> float:
        return float(self.years.mean())

    @property
    def centered_time(self) -> np.ndarray:
        return self.years - self.years.mean()


@dataclass(frozen=True)
class AR1Precision:
    """Tridiagonal precision ``Q = U'U`` of a unit-innovation AR(1) path.

    Only the bidiagonal factor ``U`` is represented; ``dense()`` (or
    ``np.asarray``) materialises ``Q``.
    """

    rho: float
    size: int

    def factor_apply(self, v: np.ndarray) -> np.ndarray:
        """``U @ v``: first entry unchanged, then ``v_t - rho v_{t-1}``."""
        v = np.asarray(v, dtype=float)
        out = v.copy()
        out[1:] -= self.rho * v[:-1]
        return out

    def factor_transpose_apply(self, v: np.ndarray) -> np.ndarray:
        out = np.array(v, dtype=float, copy=True)
        out[:-1] -= self.rho * np.asarray(v, dtype=float)[1:]
        return out

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.factor_transpose_apply(self.factor_apply(v))

    def quad(self, v: np.ndarray) -> float:
        u = self.factor_apply(v)
        return float(np.dot(u, u))

    def bilinear(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.dot(self.factor_apply(a), self.factor_apply(b)))

    @property
    def diagonal(self) -> np.ndarray:
        sub = np.full(self.size - 1, -self.rho)
        d = np.ones(self.size)
        d[:-1] += sub**2
        return d

    @property
    def off_diagonal(self) -> np.ndarray:
        # (U'U)_{j,j+1} = U_{j+1,j} * U_{j+1,j+1}
        return np.full(self.size - 1, -self.rho)

    def logdet(self) -> float:
        # log|Q| = 2 log|det U|, and U is unit lower-bidiagonal
        return 0.0

    def factor(self) -> np.ndarray:
        U = np.eye(self.size)
        U[np.arange(1, self.size), np.arange(self.size - 1)] = -self.rho
        return U

    def dense(self) -> np.ndarray:
        Q = np.diag(self.diagonal)
        k = np.arange(self.size - 1)
        Q[k, k + 1] = self.off_diagonal
        Q[k + 1, k] = self.off_diagonal
        return Q

    def __array__(self, dtype=None, copy=None):
        Q = self.dense()
        return Q.astype(dtype) if dtype is not None else Q


def build_precision(rho: float, N: int) -> AR1Precision:
    if N < 2:
        raise ValueError("AR(1) precision needs N >= 2")
    if not -1.0 < rho < 1.0:
        raise ValueError(f"rho={rho!r} outside (-1, 1)")
    return AR1Precision(float(rho), int(N))


def ar1_quad(series: np.ndarray, mean: np.ndarray, rho: float) -> float:
    """``(k - m)' Q (k - m)`` without materialising Q."""
    r = np.asarray(series, dtype=float) - mean
    u0 = r[0]
    u = r[1:] - rho * r[:-1]
    return float(u0 * u0 + np.dot(u, u))


def ar1_logdensity(
    series: np.ndarray,
    phi: Sequence[float],
    rho: float,
    sigma2: float,
    design: DriftDesign,
) -> float:
    """Log density of ``N(W phi, sigma2 Q(rho)^-1)`` at ``series``."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    series = np.asarray(series, dtype=float)
    N = series.shape[0]
    Q = build_precision(rho, N)
    quad = Q.quad(series - design.eta(phi))
    return -0.5 * N * (LOG_2PI + math.log(sigma2)) + 0.5 * Q.logdet() - 0.5 * quad / sigma2


def log_mu_grid(state: ModelState) -> np.ndarray:
    return (
        state.alpha[:, :, None]
        + state.beta[None, :, None] * state.kappa[None, None, :]
        + state.beta_pop[:, :, None] * state.kappa_pop[:, None, :]
        + state.nu
    )


def linear_predictor(state: ModelState, i: int, x: int, t: int) -> float:
    """``log mu`` for population index ``i``, age index ``x``, year index ``t``."""
    return float(
        state.alpha[i, x]
        + state.beta[x] * state.kappa[t]
        + state.beta_pop[i, x] * state.kappa_pop[i, t]
        + state.nu[i, x, t]
    )


def poisson_loglik(
    dataset: MortalityDataset,
    state: ModelState,
    scope: np.ndarray | None = None,
    kernel: bool = False,
) -> float:
    """Poisson log-likelihood summed over ``scope`` (boolean mask, default all observed cells).

    ``kernel=True`` drops the state-free terms ``D log E - log D!``. Any
    linear predictor above 700 in scope yields ``-inf``.
    """
    mask = dataset.observed if scope is None else (np.asarray(scope, dtype=bool) & dataset.observed)
    if not mask.any():
        return 0.0
    eta = log_mu_grid(state)[mask]
    if np.any(eta > LOG_MU_MAX) or np.any(np.isnan(eta)):
        return -math.inf
    D = dataset.deaths_f[mask]
    E = dataset.exposures_f[mask]
    total = float(np.sum(D * eta - E * np.exp(eta)))
    if not kernel:
        total += float(np.sum(D * dataset.log_exposures[mask] - dataset.log_factorial[mask]))
    return total
