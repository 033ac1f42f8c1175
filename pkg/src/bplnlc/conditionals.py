"""Closed-form full conditionals and the small samplers built on them.

Every function here is pure: it maps sufficient statistics to distribution
parameters (or draws from that distribution with a supplied Generator).
The sweep in :mod:`bplnlc.sampler` wires them to a :class:`ModelState`.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import special, stats

from .model import AR1Precision, DriftDesign, build_precision

XI_FLOOR = 1e-15


class DomainError(ValueError):
    """A conditional was evaluated outside its support."""


# -- generic draws ---------------------------------------------------------


def draw_inverse_gamma(shape, rate, rng: np.random.Generator):
    """Draw from InvGamma(shape, rate) (density proportional to x^(-shape-1) exp(-rate/x)).

    Tiny shapes can underflow the gamma draw to 0; the result is then inf.
    """
    with np.errstate(divide="ignore", over="ignore"):
        return np.asarray(rate, dtype=float) / rng.gamma(shape)


def draw_log_gamma(shape, rate, rng: np.random.Generator) -> np.ndarray:
    """``log`` of a Gamma(shape, rate) draw, stable for small shapes.

    For shape < 1 the usual boost ``G(a) = G(a+1) U^(1/a)`` keeps the log finite
    where a direct draw would underflow to zero.
    """
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    shape, rate = np.broadcast_arrays(shape, rate)
    small = shape < 1.0
    g = rng.gamma(np.where(small, shape + 1.0, shape))
    u = rng.random(shape.shape)
    out = np.log(g) - np.log(rate)
    return np.where(small, out + np.log(u) / np.where(small, shape, 1.0), out)


def draw_truncated_normal(mean: float, var: float, rng: np.random.Generator, lo=-1.0, hi=1.0) -> float:
    """Draw from N(mean, var) restricted to (lo, hi).

    Inverse-CDF sampling is delegated to ``scipy.stats.truncnorm``, which works
    in log space in the tails. When the interval holds less than 1e-300 of the
    mass the draw falls back to rejection from the nearest-edge exponential
    envelope (capped), then errors.
    """
    if not var > 0:
        raise DomainError("truncated normal variance must be positive")
    sd = math.sqrt(var)
    a, b = (lo - mean) / sd, (hi - mean) / sd
    log_mass = _log_interval_mass(a, b)
    if log_mass > math.log(1e-300):
        x = float(stats.truncnorm.rvs(a, b, loc=mean, scale=sd, random_state=rng))
        if lo < x < hi:
            return x
    return _truncnorm_rejection(a, b, mean, sd, rng)


def _log_interval_mass(a: float, b: float) -> float:
    if a > 0:  # both bounds in the right tail: use the mirrored left tail
        a, b = -b, -a
    la, lb = special.log_ndtr(a), special.log_ndtr(b)
    if la == -math.inf:
        return float(lb)
    return float(lb + math.log1p(-math.exp(la - lb))) if lb > la else -math.inf


def _truncnorm_rejection(a, b, mean, sd, rng, cap=100_000):
    # standardized interval sits wholly in one tail; exponential proposal at the near edge
    sign = 1.0
    if b <= 0:
        a, b, sign = -b, -a, -1.0
    lam = 0.5 * (a + math.sqrt(a * a + 4.0))
    for _ in range(cap):
        z = a + rng.exponential(1.0 / lam)
        if z < b and rng.random() <= math.exp(-0.5 * (z - lam) ** 2):
            return mean + sign * sd * z
    raise DomainError("truncated normal rejection sampler exceeded its retry cap")


# -- age block -------------------------------------------------------------


def e_conditional(death_total, rate_term, a, b, shift: float = 0.0):
    """Gamma (shape, rate) of ``e = exp(alpha)`` given everything else.

    ``death_total`` is the sum of observed deaths at the age, ``rate_term`` the
    exposure-weighted sum of ``exp(beta kappa + beta_i kappa_i + nu)``. With
    ``shift=0`` this is the exact conjugate update of a Gamma(a, b) prior
    on ``e``; ``shift=-1`` reproduces the published update, whose extra -1
    comes from a Jacobian that the Gamma prior on ``e`` does not need.
    """
    return np.asarray(a + death_total + shift, dtype=float), np.asarray(b + rate_term, dtype=float)


def sigma2_beta_conditional(beta: np.ndarray, a: float, b: float) -> tuple[float, float]:
    """InvGamma (shape, rate) for the variance of an N(J/M, s2 I) age loading."""
    beta = np.asarray(beta, dtype=float)
    M = beta.shape[-1]
    r = beta - 1.0 / M
    return a + 0.5 * M, b + 0.5 * float(np.dot(r, r))


# -- time block ------------------------------------------------------------


def phi_conditional(
    kappa: np.ndarray,
    Q: AR1Precision,
    sigma2: float,
    design: DriftDesign,
    phi0: np.ndarray,
    sigma0: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the bivariate normal drift conditional."""
    W = design.W
    QW = np.column_stack([Q.matvec(W[:, 0]), Q.matvec(W[:, 1])])
    s0inv = np.linalg.inv(sigma0)
    prec = W.T @ QW + sigma2 * s0inv
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise DomainError("drift posterior precision is not positive definite") from exc
    rhs = QW.T @ kappa + sigma2 * (s0inv @ phi0)
    sigma_star = _chol_inverse(chol)
    return sigma_star @ rhs, sigma2 * sigma_star


def _chol_inverse(chol: np.ndarray) -> np.ndarray:
    inv_l = np.linalg.inv(chol)
    out = inv_l.T @ inv_l
    return 0.5 * (out + out.T)


def rho_conditional(residual: np.ndarray, sigma2: float, sigma2_rho: float) -> tuple[float, float]:
    """Untruncated (mean, variance) of the AR coefficient conditional.

    ``residual`` is ``kappa - eta``; the lag sums give a_rho and b_rho.
    """
    r = np.asarray(residual, dtype=float)
    a_rho = float(np.dot(r[:-1], r[:-1]))
    b_rho = float(np.dot(r[1:], r[:-1]))
    denom = a_rho + sigma2 / sigma2_rho
    return b_rho / denom, sigma2 / denom


def sigma2_kappa_conditional(
    residual: np.ndarray,
    rho: float,
    a: float,
    b: float,
    slab_sq: float = 0.0,
    slab_count: int = 0,
) -> tuple[float, float]:
    """InvGamma (shape, rate) of an AR innovation variance.

    ``slab_sq`` is ``sum_l w_l phi_l^2 / c_l`` and ``slab_count`` is ``w_1 + w_2``:
    the slab prior on population drifts scales with this variance, so both
    enter the exact update. Leave them at zero for the common index.
    """
    N = len(residual)
    quad = build_precision(rho, N).quad(residual)
    return a + 0.5 * N + 0.5 * slab_count, b + 0.5 * quad + 0.5 * slab_sq


def kappa_kernel(kappa: np.ndarray, t: int, eta: np.ndarray, rho: float, sigma2: float) -> tuple[float, float]:
    """Gaussian (mean, variance) of the local AR kernel f(kappa_t | kappa_-t).

    First year: f(k_1) f(k_2 | k_1); interior: f(k_t | k_t-1) f(k_t+1 | k_t);
    last year: f(k_N | k_N-1). Each factor is a Gaussian in ``kappa - eta``
    with innovation variance ``sigma2``.
    """
    r = np.asarray(kappa, dtype=float) - eta
    N = len(r)
    prec = 1.0 + rho * rho if t < N - 1 else 1.0
    lin = 0.0
    if t > 0:
        lin += rho * r[t - 1]
    if t < N - 1:
        lin += rho * r[t + 1]
    return eta[t] + lin / prec, sigma2 / prec


def log_kappa_kernel(value: float, kappa: np.ndarray, t: int, eta: np.ndarray, rho: float, sigma2: float) -> float:
    """Unnormalised log f(kappa_t = value | kappa_-t), written term by term."""
    N = len(kappa)
    rt = value - eta[t]
    if t == 0:
        nxt = kappa[1] - eta[1] - rho * rt
        q = rt * rt + nxt * nxt
    elif t < N - 1:
        cur = rt - rho * (kappa[t - 1] - eta[t - 1])
        nxt = kappa[t + 1] - eta[t + 1] - rho * rt
        q = cur * cur + nxt * nxt
    else:
        cur = rt - rho * (kappa[t - 1] - eta[t - 1])
        q = cur * cur
    return -0.5 * q / sigma2


# -- spike and slab --------------------------------------------------------


def spike_log_ratio(z: np.ndarray, column: np.ndarray, Q: AR1Precision, sigma2: float, c: float) -> float:
    """log R* = log m(kappa | w_l = 0) - log m(kappa | w_l = 1).

    ``z`` is the residual with component l removed; ``column`` is W_l. The slab
    is N(0, c sigma2).
    """
    g = Q.quad(column)
    h = Q.bilinear(column, z)
    return 0.5 * math.log1p(c * g) - h * h / (2.0 * sigma2 * (g + 1.0 / c))


def inclusion_probability(p: float, log_ratio: float) -> float:
    """xi = p / (p + (1 - p) R*), evaluated in log space and clamped."""
    if p <= 0.0:
        return XI_FLOOR
    if p >= 1.0:
        return 1.0 - XI_FLOOR
    # xi = 1 / (1 + exp(log((1-p)/p) + log R*))
    xi = float(special.expit(-(math.log1p(-p) - math.log(p) + log_ratio)))
    return min(max(xi, XI_FLOOR), 1.0 - XI_FLOOR)


def slab_conditional(z: np.ndarray, column: np.ndarray, Q: AR1Precision, sigma2: float, c: float) -> tuple[float, float]:
    """(mean, variance) of a single included drift component given the residual ``z``."""
    g = Q.quad(column)
    h = Q.bilinear(column, z)
    denom = g + 1.0 / c
    return h / denom, sigma2 / denom


def joint_slab_conditional(
    kappa: np.ndarray, Q: AR1Precision, sigma2: float, c: np.ndarray, design: DriftDesign
) -> tuple[np.ndarray, np.ndarray]:
    """a* and A* sigma2 for both drift components included."""
    W = design.W
    QW = np.column_stack([Q.matvec(W[:, 0]), Q.matvec(W[:, 1])])
    prec = W.T @ QW + np.diag(1.0 / np.broadcast_to(c, (2,)))
    A = _chol_inverse(np.linalg.cholesky(prec))
    return A @ (QW.T @ kappa), sigma2 * A


def p_conditional(w: np.ndarray, a: float, b: float) -> tuple[float, float]:
    k = float(np.sum(w))
    return a + k, b + len(w) - k


# -- overdispersion --------------------------------------------------------


def sigma2_nu_conditional(nu: np.ndarray, a: float, b: float) -> tuple[float, float]:
    nu = np.asarray(nu, dtype=float)
    return a + 0.5 * nu.size, b + 0.5 * float(np.sum(nu * nu))
