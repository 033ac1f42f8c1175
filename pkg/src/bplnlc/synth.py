"""Forward simulation of datasets from known or prior-drawn parameters.

Prior draws respect the identifiability constraints exactly: each constrained
block is drawn from its prior density restricted to the constraint surface
(a hyperplane for ``beta``, ``kappa`` and ``kappa_pop``; the unit sphere for
``beta_pop``). Those restricted densities are what the exact sampler targets,
so this is also the marginal-conditional simulator of the getting-it-right
check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import special, stats

from . import conditionals as cond
from .data import MortalityDataset
from .model import LOG_MU_MAX, DriftDesign, Hyperparams, ModelState, build_precision, log_mu_grid

POISSON_MEAN_MAX = 1e12


class SimulationError(RuntimeError):
    pass


@dataclass
class SynthSpec:
    """What to simulate.

    Either ``truth`` is given (its ``kappa``/``kappa_pop``/``nu`` are redrawn
    from their distributions unless ``resample_latent`` is False) or
    ``prior_draw`` asks for a full draw from the priors.
    ``exposure`` is a constant or a per-age profile of length ``M``.
    """

    M: int = 10
    N: int = 20
    n: int = 2
    truth: ModelState | None = None
    prior_draw: bool = False
    exposure: float | Sequence[float] = 1000.0
    seed: int = 0
    hyper: Hyperparams = field(default_factory=Hyperparams)
    first_year: int = 1
    first_age: int = 0
    resample_latent: bool = True
    spike: bool = True
    overdispersion: bool = True
    variance_cap: float | None = 1e4
    max_retries: int = 100
    populations: Sequence[str] | None = None

    def __post_init__(self):
        if self.M < 2 or self.N < 3 or self.n < 1:
            raise ValueError("dims must be at least (M, N, n) = (2, 3, 1)")
        if self.truth is None and not self.prior_draw:
            raise ValueError("give a truth state or set prior_draw")
        if self.truth is not None and not self.prior_draw:
            t = self.truth
            if (t.n, t.M, t.N) != (self.n, self.M, self.N):
                raise ValueError(f"truth has dims {(t.M, t.N, t.n)}, spec asks for {(self.M, self.N, self.n)}")
        E = np.asarray(self.exposure, dtype=float)
        if E.ndim not in (0, 1) or (E.ndim == 1 and E.shape[0] != self.M):
            raise ValueError("exposure must be a scalar or a length-M age profile")
        if np.any(~(E > 0)):
            raise ValueError("exposures must be positive")

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.first_year, self.first_year + self.N)

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.first_age, self.first_age + self.M)

    @property
    def labels(self) -> list[str]:
        return list(self.populations) if self.populations is not None else [f"P{i + 1}" for i in range(self.n)]

    def exposure_grid(self) -> np.ndarray:
        E = np.asarray(self.exposure, dtype=float)
        if E.ndim == 1:
            E = E[:, None]
        return np.broadcast_to(E, (self.n, self.M, self.N)).astype(float)


class _CapTracker:
    def __init__(self, cap):
        self.cap = cap
        self.count = 0

    def __call__(self, value):
        if self.cap is not None and value > self.cap:
            self.count += 1
            return float(self.cap)
        return float(value)


# -- constrained Gaussian helpers ------------------------------------------


def ar1_path(eta: np.ndarray, rho: float, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """Unconstrained draw from N(eta, sigma2 Q(rho)^-1): U^-1 applied to white noise."""
    z = rng.standard_normal(len(eta))
    for t in range(1, len(z)):
        z[t] += rho * z[t - 1]
    return eta + math.sqrt(sigma2) * z


def condition_sum_zero(path: np.ndarray, rho: float) -> np.ndarray:
    """Condition an AR(1)-precision Gaussian draw on ``sum == 0`` by kriging."""
    Q = build_precision(rho, len(path)).dense()
    g = np.linalg.solve(Q, np.ones(len(path)))
    return path - g * (path.sum() / g.sum())


def _sum_variance(rho: float, N: int) -> float:
    """u' Q^-1 u with u = 1/sqrt(N)."""
    Q = build_precision(rho, N).dense()
    return float(np.linalg.solve(Q, np.ones(N)).sum()) / N


def _truncated_rho(sigma2_rho: float, rng) -> float:
    return cond.draw_truncated_normal(0.0, sigma2_rho, rng)


# -- sphere block ----------------------------------------------------------


@lru_cache(maxsize=64)
def _sphere_variance_grid(a: float, b: float, M: int, points: int = 40001):
    """Grid on log(s2) and CDF for the variance of a loading restricted to the unit sphere.

    The restricted prior's normaliser contributes the vMF constant, so
    p(s2) is the inverse-gamma prior times s2^(-M/2) exp(-(1+1/M)/(2 s2)) I_v(k) k^-v
    with v = M/2 - 1 and k = 1/(sqrt(M) s2).
    """
    nu = 0.5 * M - 1.0
    y = np.linspace(-35.0, 35.0, points)
    s = np.exp(y)
    k = 1.0 / (math.sqrt(M) * s)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        bessel = np.log(special.ive(nu, k)) + k - nu * np.log(k)
    # outside the range of ive use the leading terms of the small- and large-k expansions
    bad = ~np.isfinite(bessel)
    small, large = bad & (k < 1.0), bad & (k >= 1.0)
    bessel[small] = -nu * math.log(2.0) - special.gammaln(nu + 1.0) + k[small] ** 2 / (4.0 * (nu + 1.0))
    kl = k[large]
    bessel[large] = kl - 0.5 * np.log(2.0 * math.pi * kl) - (4.0 * nu * nu - 1.0) / (8.0 * kl) - nu * np.log(kl)
    logp = (-a - 1.0) * y - b / s + y - 0.5 * M * y - (1.0 + 1.0 / M) / (2.0 * s) + bessel
    logp -= logp.max()
    dens = np.exp(logp)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(y))])
    cdf /= cdf[-1]
    return y, cdf


def draw_sphere_loading(a: float, b: float, M: int, rng: np.random.Generator, cap: _CapTracker | None = None):
    """Draw (s2, beta) for N(J/M, s2 I) restricted to ||beta|| = 1 with s2 ~ InvGamma(a, b)."""
    y, cdf = _sphere_variance_grid(float(a), float(b), int(M))
    s2 = float(np.exp(np.interp(rng.random(), cdf, y)))
    if cap is not None:
        s2 = cap(s2)
    mu = np.full(M, 1.0 / math.sqrt(M))
    k = 1.0 / (math.sqrt(M) * s2)
    beta = np.asarray(stats.vonmises_fisher(mu, k).rvs(random_state=rng), dtype=float).reshape(M)
    return s2, beta / np.linalg.norm(beta)


# -- full prior draw -------------------------------------------------------


def sample_prior(
    hyper: Hyperparams,
    M: int,
    N: int,
    n: int,
    years: np.ndarray,
    rng: np.random.Generator,
    spike: bool = True,
    overdispersion: bool = True,
    variance_cap: float | None = None,
    max_retries: int = 10_000,
) -> tuple[ModelState, dict]:
    """One draw of every parameter from the priors restricted to the constraint surface."""
    cap = _CapTracker(variance_cap)
    design = DriftDesign(years)
    W = design.W
    u = np.full(N, 1.0 / math.sqrt(N))
    uW = W.T @ u

    a_x, b_x = hyper.age_prior(n, M)
    alpha = cond.draw_log_gamma(a_x, b_x, rng)

    s2_beta = cap(float(cond.draw_inverse_gamma(hyper.a_beta + 0.5, hyper.b_beta, rng)))
    z = rng.standard_normal(M)
    beta = 1.0 / M + math.sqrt(s2_beta) * (z - z.mean())

    a_bp, b_bp = hyper.pop("a_beta_pop", n), hyper.pop("b_beta_pop", n)
    beta_pop = np.empty((n, M))
    s2_beta_pop = np.empty(n)
    for i in range(n):
        s2_beta_pop[i], beta_pop[i] = draw_sphere_loading(a_bp[i], b_bp[i], M, rng, cap)

    # common time block: (rho, s2) weighted by the density of u'kappa at 0
    phi0, S0 = hyper.phi0_array, hyper.sigma0_array
    m0 = float(uW @ phi0)
    s0 = float(uW @ S0 @ uW)
    log_sup = _log_normal0(m0, max(s0, m0 * m0))
    for _ in range(max_retries):
        rho = _truncated_rho(hyper.sigma2_rho, rng)
        s2k = cap(float(cond.draw_inverse_gamma(hyper.a_kappa, hyper.b_kappa, rng)))
        v = _sum_variance(rho, N)
        if math.log(rng.random()) <= _log_normal0(m0, s0 + s2k * v) - log_sup:
            break
    else:
        raise SimulationError("common time block rejection sampler exceeded its retry cap")
    gain = S0 @ uW / (s0 + s2k * v)
    phi_mean = phi0 - gain * m0
    phi_cov = S0 - np.outer(gain, uW @ S0)
    phi = phi_mean + np.linalg.cholesky(0.5 * (phi_cov + phi_cov.T)) @ rng.standard_normal(2)
    kappa = condition_sum_zero(ar1_path(design.eta(phi), rho, s2k, rng), rho)

    # population time blocks
    a_kp, b_kp = hyper.pop("a_kappa_pop", n), hyper.pop("b_kappa_pop", n)
    s2_rho_pop = hyper.pop("sigma2_rho_pop", n)
    slab = hyper.slab(n)
    v_floor = N / (1.0 + 4.0 * (N - 1.0))
    kappa_pop = np.empty((n, N))
    phi_pop = np.zeros((n, 2))
    rho_pop = np.empty(n)
    s2kp = np.empty(n)
    w = np.zeros((n, 2), dtype=np.int8)
    p = np.full(n, 0.5)
    for i in range(n):
        s2kp[i] = cap(float(cond.draw_inverse_gamma(a_kp[i] + 0.5, b_kp[i], rng)))
        for _ in range(max_retries):
            if spike:
                p[i] = min(max(rng.beta(hyper.a_p, hyper.b_p), cond.XI_FLOOR), 1.0 - cond.XI_FLOOR)
                w[i] = (rng.random(2) < p[i]).astype(np.int8)
            rho_pop[i] = _truncated_rho(s2_rho_pop[i], rng)
            v = _sum_variance(rho_pop[i], N)
            s_w = float(np.sum(w[i] * slab[i] * uW**2))
            if rng.random() <= math.sqrt(v_floor / (s_w + v)):
                break
        else:
            raise SimulationError("population time block rejection sampler exceeded its retry cap")
        on = np.flatnonzero(w[i])
        if on.size:
            prior_cov = np.diag(slab[i][on]) * s2kp[i]
            h = uW[on]
            gain = prior_cov @ h / (h @ prior_cov @ h + s2kp[i] * v)
            cov = prior_cov - np.outer(gain, h @ prior_cov)
            cov = 0.5 * (cov + cov.T)
            phi_pop[i, on] = np.linalg.cholesky(cov) @ rng.standard_normal(on.size)
        kappa_pop[i] = condition_sum_zero(ar1_path(design.eta(phi_pop[i]), rho_pop[i], s2kp[i], rng), rho_pop[i])

    s2_nu = np.ones(n)
    nu = np.zeros((n, M, N))
    if overdispersion:
        a_mu, b_mu = hyper.pop("a_mu", n), hyper.pop("b_mu", n)
        for i in range(n):
            s2_nu[i] = cap(float(cond.draw_inverse_gamma(a_mu[i], b_mu[i], rng)))
            nu[i] = math.sqrt(s2_nu[i]) * rng.standard_normal((M, N))

    state = ModelState(
        alpha=alpha, beta=beta, beta_pop=beta_pop, sigma2_beta=s2_beta, sigma2_beta_pop=s2_beta_pop,
        kappa=kappa, kappa_pop=kappa_pop, phi=phi, phi_pop=phi_pop, rho=rho, rho_pop=rho_pop,
        sigma2_kappa=s2k, sigma2_kappa_pop=s2kp, w=w, p=p, nu=nu, sigma2_nu=s2_nu,
    )
    return state, {"variance_cap": variance_cap, "capped_draws": cap.count}


def _log_normal0(mean: float, var: float) -> float:
    return -0.5 * math.log(2.0 * math.pi * var) - 0.5 * mean * mean / var


# -- data given parameters -------------------------------------------------


def simulate_counts(state: ModelState, exposures: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One Poisson draw per cell with mean E mu."""
    eta = log_mu_grid(state)
    if np.any(eta > LOG_MU_MAX):
        raise SimulationError("linear predictor above 700")
    mean = exposures * np.exp(eta)
    if np.any(mean > POISSON_MEAN_MAX):
        raise SimulationError("Poisson mean above 1e12")
    return rng.poisson(mean)


def redraw_latent(truth: ModelState, years: np.ndarray, rng: np.random.Generator, overdispersion: bool = True) -> ModelState:
    """Redraw kappa, kappa_pop (sum-zero conditioned) and nu from their distributions given the rest of ``truth``."""
    s = truth.copy()
    design = DriftDesign(years)
    s.kappa = condition_sum_zero(ar1_path(design.eta(s.phi), s.rho, s.sigma2_kappa, rng), s.rho)
    for i in range(s.n):
        s.phi_pop[i] = np.where(s.w[i] == 1, s.phi_pop[i], 0.0)
        path = ar1_path(design.eta(s.phi_pop[i]), s.rho_pop[i], s.sigma2_kappa_pop[i], rng)
        s.kappa_pop[i] = condition_sum_zero(path, s.rho_pop[i])
    if overdispersion:
        s.nu = np.sqrt(np.maximum(s.sigma2_nu, 0.0))[:, None, None] * rng.standard_normal(s.nu.shape)
    else:
        s.nu = np.zeros_like(s.nu)
    return s


def simulate_dataset(spec: SynthSpec) -> tuple[MortalityDataset, ModelState]:
    """Draw parameters (or use ``spec.truth``) and Poisson counts on the spec's grid."""
    ds, truth, _ = simulate(spec)
    return ds, truth


def simulate(spec: SynthSpec) -> tuple[MortalityDataset, ModelState, dict]:
    """As :func:`simulate_dataset`, also returning metadata (variance cap and capped-draw count)."""
    rng = np.random.default_rng(spec.seed)
    E = spec.exposure_grid()
    meta = {"variance_cap": None, "capped_draws": 0}
    for attempt in range(spec.max_retries):
        if spec.prior_draw:
            truth, meta = sample_prior(spec.hyper, spec.M, spec.N, spec.n, spec.years, rng,
                                       spike=spec.spike, overdispersion=spec.overdispersion,
                                       variance_cap=spec.variance_cap)
        elif spec.resample_latent:
            truth = redraw_latent(spec.truth, spec.years, rng, spec.overdispersion)
        else:
            truth = spec.truth.copy()
        try:
            D = simulate_counts(truth, E, rng)
            break
        except SimulationError:
            if not (spec.prior_draw or spec.resample_latent):
                raise
    else:
        raise SimulationError(f"no finite dataset after {spec.max_retries} draws")
    ds = MortalityDataset(
        ages=spec.ages, years=spec.years, populations=tuple(spec.labels),
        deaths=D, exposures=E, missing=np.zeros(E.shape, dtype=bool),
    )
    meta = dict(meta, retries=attempt)
    return ds, truth, meta


def example_truth(
    M: int,
    N: int,
    n: int,
    rng: np.random.Generator,
    phi_pop: Sequence[Sequence[float]] | None = None,
    phi: Sequence[float] = (0.0, 0.0),
    rho: float = 0.5,
    rho_pop: float = 0.5,
    sigma2_kappa: float = 0.5,
    sigma2_kappa_pop: float = 0.1,
    sigma2_nu: float = 0.01,
    first_year: int = 1,
) -> ModelState:
    """A plausible parameter set: rising log-rate profile, positive loadings, given drifts.

    Latent paths are drawn here too (sum-zero conditioned) so the state is complete.
    """
    x = np.linspace(0.0, 1.0, M)
    alpha = np.tile(-6.0 + 4.0 * x, (n, 1)) + 0.2 * rng.standard_normal((n, M))
    beta = 0.5 + rng.random(M)
    beta /= beta.sum()
    beta_pop = 0.5 + rng.random((n, M))
    beta_pop /= np.linalg.norm(beta_pop, axis=1, keepdims=True)
    phi_pop = np.zeros((n, 2)) if phi_pop is None else np.asarray(phi_pop, dtype=float)
    w = (phi_pop != 0).astype(np.int8)
    years = np.arange(first_year, first_year + N)
    state = ModelState(
        alpha=alpha, beta=beta, beta_pop=beta_pop, sigma2_beta=0.01, sigma2_beta_pop=np.full(n, 0.01),
        kappa=np.zeros(N), kappa_pop=np.zeros((n, N)), phi=np.asarray(phi, dtype=float), phi_pop=phi_pop,
        rho=rho, rho_pop=np.full(n, rho_pop), sigma2_kappa=sigma2_kappa,
        sigma2_kappa_pop=np.full(n, sigma2_kappa_pop), w=w, p=np.full(n, 0.5),
        nu=np.zeros((n, M, N)), sigma2_nu=np.full(n, sigma2_nu),
    )
    return redraw_latent(state, years, rng)
