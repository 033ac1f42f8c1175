"""Metropolis-within-Gibbs sampler.

One sweep updates, in a fixed order, the age block, the common and
population-specific time blocks (with spike-and-slab drift selection) and the
overdispersion block. Identifiability is kept by renormalising after every
single-coordinate move:

* ``beta`` step: divide ``beta`` by its sum, multiply ``kappa`` by it;
* ``beta_pop`` step: divide by the L2 norm, multiply ``kappa_pop`` by it;
* ``kappa`` step: subtract the mean, push ``beta * mean`` into ``alpha``.

Two acceptance schemes share these moves. ``"exact"`` treats each
propose-then-renormalise move as a deterministic map on the constraint
surface and includes everything the map changes (priors of every touched
block, the reverse proposal and the Jacobian), so the chain leaves the
constrained posterior invariant. ``"published"`` scores only the local
one-coordinate kernel before renormalising, together with the published
``-1`` in the ``e_x`` shape and the slab-free variance update.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import conditionals as cond
from .data import MortalityDataset
from .model import (
    LOG_MU_MAX,
    DriftDesign,
    Hyperparams,
    ModelState,
    build_precision,
    log_mu_grid,
)

log = logging.getLogger(__name__)

SCHEMES = ("exact", "published")
FAMILIES = ("beta_common", "beta_pop", "kappa_common", "kappa_pop", "nu", "trend_shift")
DEFAULT_ORDER = (
    "alpha",
    "beta_common",
    "beta_pop",
    "kappa_common",
    "phi_common",
    "rho_common",
    "sigma2_kappa_common",
    "population_time",
    "overdispersion",
    "sigma2_beta",
    "trend_shift",
)
RENORM_TOL = 1e-12
TREND_SHIFT_TRIES = 5


class InvalidStateError(RuntimeError):
    """The chain reached a state of zero target density."""


class RenormalizationError(RuntimeError):
    """A renormalising divisor collapsed to zero."""


class SamplerError(RuntimeError):
    def __init__(self, iteration: int, block: str, cause: Exception):
        super().__init__(f"iteration {iteration}, block {block}: {cause}")
        self.iteration = iteration
        self.block = block


def mh_accept(log_target_current: float, log_target_proposal: float, u: float) -> bool:
    """Accept iff ``u <= min(1, exp(proposal - current))``."""
    if log_target_current == -math.inf or math.isnan(log_target_current):
        raise InvalidStateError("current state has zero target density")
    return _accept(log_target_proposal - log_target_current, u)


def _accept(log_ratio: float, u: float) -> bool:
    if not log_ratio > -math.inf:  # -inf or nan
        return False
    return log_ratio >= 0.0 or u <= math.exp(log_ratio)


@dataclass
class SamplerConfig:
    """Run length, seeding and model variant.

    ``alpha_shape_shift`` overrides the offset added to the ``e_x`` Gamma shape
    (default 0 for the exact scheme, -1 for the published one).
    ``proposal_scales`` fixes the initial random-walk standard deviation per
    family; missing families are derived from local curvature at the start.
    """

    total: int = 20000
    burn_in: int = 10000
    thin: int = 1
    seed: int = 0
    overdispersion: bool = True
    spike: bool = True
    scheme: str = "exact"
    adapt: bool = True
    adapt_window: int = 50
    target_band: tuple[float, float] = (0.20, 0.40)
    alpha_shape_shift: float | None = None
    proposal_scales: dict | None = None
    update_order: tuple[str, ...] = DEFAULT_ORDER

    def __post_init__(self):
        if self.total < 1:
            raise ValueError("total iterations must be positive")
        if not 0 <= self.burn_in < self.total:
            raise ValueError("burn-in must satisfy 0 <= burn_in < total")
        if self.thin < 1:
            raise ValueError("thinning stride must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.adapt_window < 1:
            raise ValueError("adaptation window must be >= 1")
        lo, hi = self.target_band
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("target band must satisfy 0 < lo < hi < 1")
        self.target_band = (float(lo), float(hi))
        self.update_order = tuple(self.update_order)
        unknown = set(self.update_order) - set(DEFAULT_ORDER)
        if unknown:
            raise ValueError(f"unknown update blocks: {sorted(unknown)}")

    @classmethod
    def for_variant(cls, variant: str, **kwargs) -> "SamplerConfig":
        if variant == "full":
            return cls(**kwargs)
        if variant == "model2":
            return cls(overdispersion=False, spike=False, **kwargs)
        raise ValueError(f"unknown model variant {variant!r}")

    @property
    def variant(self) -> str:
        if self.overdispersion and self.spike:
            return "full"
        if not self.overdispersion and not self.spike:
            return "model2"
        return "custom"

    @property
    def shape_shift(self) -> float:
        if self.alpha_shape_shift is not None:
            return float(self.alpha_shape_shift)
        return 0.0 if self.scheme == "exact" else -1.0

    @property
    def n_draws(self) -> int:
        return (self.total - self.burn_in) // self.thin

    def to_dict(self) -> dict:
        out = asdict(self)
        out["target_band"] = list(self.target_band)
        out["update_order"] = list(self.update_order)
        return out


class MhTuner:
    """Per-coordinate random-walk scales with windowed burn-in adaptation.

    At the end of every ``window`` iterations while adaptation is on, each
    coordinate's scale is multiplied by 1.1 if its window acceptance exceeded
    the upper band edge and by 0.9 if it fell below the lower edge.
    """

    def __init__(self, scales: dict[str, np.ndarray], window: int = 50, band=(0.20, 0.40), enabled: bool = True):
        self.sd = {k: np.array(v, dtype=float) for k, v in scales.items()}
        for k, v in self.sd.items():
            if np.any(~(v > 0)):
                raise ValueError(f"proposal scales for {k} must be positive")
        self.window = int(window)
        self.band = band
        self.enabled = enabled
        self._acc = {k: np.zeros(v.shape) for k, v in self.sd.items()}
        self._att = {k: np.zeros(v.shape) for k, v in self.sd.items()}
        self.changes = 0

    def record(self, family: str, index, accepted) -> None:
        if family not in self._att:
            return
        self._att[family][index] += 1
        self._acc[family][index] += accepted

    def record_all(self, family: str, accepted: np.ndarray, attempted: np.ndarray) -> None:
        self._att[family] += attempted
        self._acc[family] += accepted

    def end_iteration(self, iteration: int) -> None:
        if not self.enabled or (iteration + 1) % self.window:
            return
        lo, hi = self.band
        for k in self.sd:
            att = self._att[k]
            rate = np.divide(self._acc[k], att, out=np.full(att.shape, 0.5 * (lo + hi)), where=att > 0)
            factor = np.where(rate > hi, 1.1, np.where(rate < lo, 0.9, 1.0))
            self.changes += int(np.count_nonzero(factor != 1.0))
            self.sd[k] *= factor
            self._acc[k][...] = 0.0
            self._att[k][...] = 0.0

    def freeze(self) -> None:
        self.enabled = False


@dataclass
class ChainOutput:
    """Stored draws and run metadata.

    ``draws`` maps each block name to an array whose first axis indexes the
    stored (thinned, post-burn-in) draws. ``w_trace`` holds the inclusion
    indicators of every post-burn-in iteration, unthinned.
    """

    draws: dict[str, np.ndarray]
    w_trace: np.ndarray
    acceptance: dict[str, tuple[int, int]]
    acceptance_burn_in: dict[str, tuple[int, int]]
    proposal_scales: dict[str, np.ndarray]
    scale_change_trace: np.ndarray
    populations: list[str]
    ages: np.ndarray
    years: np.ndarray
    config: SamplerConfig
    hyper: Hyperparams
    seed: int
    wall_seconds: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return next(iter(self.draws.values())).shape[0]

    def state(self, k: int) -> ModelState:
        """Rebuild stored draw ``k`` as a ModelState (absent blocks filled with their pinned values)."""
        d = {name: np.array(arr[k]) for name, arr in self.draws.items()}
        n, M, N = len(self.populations), len(self.ages), len(self.years)
        for name in ("sigma2_beta", "sigma2_kappa", "rho"):
            d[name] = float(d[name])
        d.setdefault("w", np.zeros((n, 2), dtype=np.int8))
        d.setdefault("p", np.full(n, 0.5))
        d.setdefault("nu", np.zeros((n, M, N)))
        d.setdefault("sigma2_nu", np.ones(n))
        return ModelState(**d)


# -- state initialisation --------------------------------------------------


def initialize_state(dataset: MortalityDataset, hyper: Hyperparams, rng: np.random.Generator | None = None,
                     spike: bool = True) -> ModelState:
    """Deterministic data-driven starting point satisfying every constraint.

    ``rng`` is accepted for interface symmetry; the construction uses no randomness.
    """
    n, M, N = dataset.n, dataset.M, dataset.N
    obs = dataset.observed
    with np.errstate(divide="ignore", invalid="ignore"):
        logr = np.where(obs, np.log((dataset.deaths + 0.5) / dataset.exposures), np.nan)
    alpha = _nanmean(logr, axis=2)
    for i in range(n):
        fallback = _nanmean(logr[i].ravel(), axis=0)
        alpha[i] = np.where(np.isnan(alpha[i]), fallback if np.isfinite(fallback) else 0.0, alpha[i])
    resid = logr - alpha[:, :, None]

    kappa = _nan_to_zero(_nanmean(resid, axis=(0, 1)))
    kappa = M * (kappa - kappa.mean())
    within = resid - kappa[None, None, :] / M
    kappa_pop = _nan_to_zero(_nanmean(within, axis=1))
    kappa_pop = math.sqrt(M) * (kappa_pop - kappa_pop.mean(axis=1, keepdims=True))

    design = DriftDesign(dataset.years)
    phi, *_ = np.linalg.lstsq(design.W, kappa, rcond=None)
    w = np.zeros((n, 2), dtype=np.int8)
    if spike:
        w[:, 0] = 1
    return ModelState(
        alpha=alpha,
        beta=np.full(M, 1.0 / M),
        beta_pop=np.full((n, M), 1.0 / math.sqrt(M)),
        sigma2_beta=1.0,
        sigma2_beta_pop=np.ones(n),
        kappa=kappa,
        kappa_pop=kappa_pop,
        phi=phi,
        phi_pop=np.zeros((n, 2)),
        rho=0.5,
        rho_pop=np.full(n, 0.5),
        sigma2_kappa=1.0,
        sigma2_kappa_pop=np.ones(n),
        w=w,
        p=np.full(n, 0.5),
        nu=np.zeros((n, M, N)),
        sigma2_nu=np.ones(n),
    )


def _prepare(state: ModelState, config: SamplerConfig) -> ModelState:
    if not config.spike:
        state.w[...] = 0
        state.phi_pop[...] = 0.0
    if not config.overdispersion:
        state.nu[...] = 0.0
    return state


def _nanmean(a, axis):
    count = np.sum(~np.isnan(a), axis=axis)
    total = np.nansum(a, axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def _nan_to_zero(a):
    return np.where(np.isnan(a), 0.0, a)


def curvature_scales(state: ModelState, dataset: MortalityDataset, factor: float = 2.4) -> dict[str, np.ndarray]:
    """Random-walk scales from the local Fisher information of each coordinate."""
    eta = np.minimum(log_mu_grid(state), LOG_MU_MAX)
    fitted = dataset.exposures_f * np.exp(eta)
    k2 = state.kappa**2
    kp2 = state.kappa_pop**2
    info = {
        "beta_common": np.einsum("ixt,t->x", fitted, k2) + 1.0 / state.sigma2_beta,
        "beta_pop": np.einsum("ixt,it->ix", fitted, kp2) + 1.0 / state.sigma2_beta_pop[:, None],
        "kappa_common": np.einsum("ixt,x->t", fitted, state.beta**2) + (1.0 + state.rho**2) / state.sigma2_kappa,
        "kappa_pop": np.einsum("ixt,ix->it", fitted, state.beta_pop**2)
        + ((1.0 + state.rho_pop**2) / state.sigma2_kappa_pop)[:, None],
        "nu": fitted + 1.0 / state.sigma2_nu[:, None, None],
    }
    info["trend_shift"] = np.array([1.0])  # a multiplier of the move's own curvature scale
    return {k: factor / np.sqrt(v) for k, v in info.items()}


# -- the sweep -------------------------------------------------------------


class GibbsSweep:
    """Bound sampler: dataset, priors, configuration, RNG and tuner."""

    def __init__(self, dataset: MortalityDataset, hyper: Hyperparams, config: SamplerConfig,
                 rng: np.random.Generator, tuner: MhTuner | None = None):
        self.data = dataset
        self.hyper = hyper
        self.config = config
        self.rng = rng
        self.tuner = tuner
        self.exact = config.scheme == "exact"
        n, M, N = dataset.n, dataset.M, dataset.N
        self.n, self.M, self.N = n, M, N
        self.design = DriftDesign(dataset.years)
        self.W = self.design.W
        self.a_x, self.b_x = hyper.age_prior(n, M)
        self.D = dataset.deaths_f
        self.E = dataset.exposures_f
        self.obs = dataset.observed
        self.all_observed = bool(self.obs.all())
        self.death_total = self.D.sum(axis=2)
        self.a_beta_pop = hyper.pop("a_beta_pop", n)
        self.b_beta_pop = hyper.pop("b_beta_pop", n)
        self.a_kappa_pop = hyper.pop("a_kappa_pop", n)
        self.b_kappa_pop = hyper.pop("b_kappa_pop", n)
        self.sigma2_rho_pop = hyper.pop("sigma2_rho_pop", n)
        self.a_mu = hyper.pop("a_mu", n)
        self.b_mu = hyper.pop("b_mu", n)
        self.slab = hyper.slab(n)
        self.counts = {f: np.zeros(2, dtype=np.int64) for f in FAMILIES}
        self.shape_warned = False

    def replace_deaths(self, deaths: np.ndarray) -> None:
        """Swap in new counts on the same grid (used by the joint-distribution check)."""
        self.D = np.where(self.obs, deaths, 0).astype(float)
        self.death_total = self.D.sum(axis=2)

    # -- helpers --

    def _record(self, family: str, index, accepted: bool) -> None:
        c = self.counts[family]
        c[0] += accepted
        c[1] += 1
        if self.tuner is not None:
            self.tuner.record(family, index, accepted)

    def _scale(self, family: str, index) -> float:
        return float(self.tuner.sd[family][index]) if self.tuner is not None else 0.1

    def _delta_loglik(self, eta_old, eta_new, D, E, obs) -> float:
        if self.all_observed:
            if eta_new.max() > LOG_MU_MAX:
                return -math.inf
        elif np.any(obs & (eta_new > LOG_MU_MAX)):
            return -math.inf
        ex_new = np.exp(np.minimum(eta_new, LOG_MU_MAX))
        ex_old = np.exp(np.minimum(eta_old, LOG_MU_MAX))
        return float(np.sum(D * (eta_new - eta_old) - E * (ex_new - ex_old)))

    def _ar_quad(self, series, eta, rho) -> float:
        r = series - eta
        u = r[1:] - rho * r[:-1]
        return float(r[0] * r[0] + np.dot(u, u))

    # -- age block --

    def update_alpha(self, s: ModelState) -> None:
        rest = s.beta[None, :, None] * s.kappa[None, None, :] + s.beta_pop[:, :, None] * s.kappa_pop[:, None, :] + s.nu
        rate_term = np.sum(self.E * np.exp(np.minimum(rest, LOG_MU_MAX)), axis=2)
        shape, rate = cond.e_conditional(self.death_total, rate_term, self.a_x, self.b_x, self.config.shape_shift)
        bad = shape <= 0
        if np.any(bad):
            if not self.shape_warned:
                log.warning("e_x shape <= 0 for %d cells; using a Metropolis step on alpha there", int(bad.sum()))
                self.shape_warned = True
            safe = np.where(bad, 1.0, shape)
            new = cond.draw_log_gamma(safe, rate, self.rng)
            for i, x in zip(*np.nonzero(bad)):
                new[i, x] = self._alpha_mh(s.alpha[i, x], self.a_x[i, x] + self.death_total[i, x],
                                           rate[i, x])
            s.alpha[...] = new
        else:
            s.alpha[...] = cond.draw_log_gamma(shape, rate, self.rng)

    def _alpha_mh(self, current: float, shape: float, rate: float) -> float:
        # kernel of alpha = log e under e ~ Gamma(shape, rate)
        prop = current + self.rng.normal()
        log_ratio = shape * (prop - current) - rate * (math.exp(prop) - math.exp(current))
        return prop if _accept(log_ratio, self.rng.random()) else current

    def update_beta_common(self, s: ModelState) -> None:
        M, N = self.M, self.N
        rng = self.rng
        eta_k = self.design.eta(s.phi)
        s2 = s.sigma2_beta
        for x in range(M):
            sd = self._scale("beta_common", x)
            delta = sd * rng.standard_normal()
            u = rng.random()
            eta = s.alpha[:, x, None] + s.beta[x] * s.kappa + s.beta_pop[:, x, None] * s.kappa_pop + s.nu[:, x, :]
            dll = self._delta_loglik(eta, eta + delta * s.kappa, self.D[:, x, :], self.E[:, x, :], self.obs[:, x, :])
            if self.exact:
                B = 1.0 + delta  # sum(beta) = 1 before the move
                if abs(B) < RENORM_TOL:
                    accepted = False
                else:
                    new = s.beta.copy()
                    new[x] += delta
                    new /= B
                    d_prior = -(np.sum((new - 1.0 / M) ** 2) - np.sum((s.beta - 1.0 / M) ** 2)) / (2.0 * s2)
                    d_ar = -(self._ar_quad(B * s.kappa, eta_k, s.rho) - self._ar_quad(s.kappa, eta_k, s.rho)) / (
                        2.0 * s.sigma2_kappa
                    )
                    back = -delta / B
                    d_q = -(back * back - delta * delta) / (2.0 * sd * sd)
                    accepted = _accept(dll + d_prior + d_ar + d_q + (N - M - 2) * math.log(abs(B)), u)
            else:
                b0 = s.beta[x] - 1.0 / M
                d_prior = -((b0 + delta) ** 2 - b0 * b0) / (2.0 * s2)
                accepted = _accept(dll + d_prior, u)
            self._record("beta_common", x, accepted)
            if accepted:
                s.beta[x] += delta
            B = s.beta.sum()
            if abs(B) < RENORM_TOL:
                raise RenormalizationError(f"sum(beta) collapsed to {B!r} at age index {x}")
            s.beta /= B
            s.kappa *= B

    def update_beta_pop(self, s: ModelState, i: int) -> None:
        M, N = self.M, self.N
        rng = self.rng
        eta_k = self.design.eta(s.phi_pop[i])
        s2 = s.sigma2_beta_pop[i]
        for x in range(M):
            sd = self._scale("beta_pop", (i, x))
            delta = sd * rng.standard_normal()
            u = rng.random()
            kp = s.kappa_pop[i]
            eta = s.alpha[i, x] + s.beta[x] * s.kappa + s.beta_pop[i, x] * kp + s.nu[i, x]
            dll = self._delta_loglik(eta, eta + delta * kp, self.D[i, x], self.E[i, x], self.obs[i, x])
            if self.exact:
                y = s.beta_pop[i].copy()
                y[x] += delta
                r = float(np.sqrt(np.dot(y, y)))
                if r < RENORM_TOL:
                    accepted = False
                else:
                    new = y / r
                    d_prior = -(np.sum((new - 1.0 / M) ** 2) - np.sum((s.beta_pop[i] - 1.0 / M) ** 2)) / (2.0 * s2)
                    rho, s2k = s.rho_pop[i], s.sigma2_kappa_pop[i]
                    d_ar = -(self._ar_quad(r * kp, eta_k, rho) - self._ar_quad(kp, eta_k, rho)) / (2.0 * s2k)
                    back = -delta / r
                    d_q = -(back * back - delta * delta) / (2.0 * sd * sd)
                    accepted = _accept(dll + d_prior + d_ar + d_q + (N - M - 2) * math.log(r), u)
            else:
                b0 = s.beta_pop[i, x] - 1.0 / M
                d_prior = -((b0 + delta) ** 2 - b0 * b0) / (2.0 * s2)
                accepted = _accept(dll + d_prior, u)
            self._record("beta_pop", (i, x), accepted)
            if accepted:
                s.beta_pop[i, x] += delta
            r = float(np.sqrt(np.dot(s.beta_pop[i], s.beta_pop[i])))
            if r < RENORM_TOL:
                raise RenormalizationError(f"||beta_pop[{i}]|| collapsed to {r!r} at age index {x}")
            s.beta_pop[i] /= r
            s.kappa_pop[i] *= r

    # -- time block --

    def update_kappa_common(self, s: ModelState) -> None:
        N = self.N
        rng = self.rng
        eta_k = self.design.eta(s.phi)
        for t in range(N):
            sd = self._scale("kappa_common", t)
            delta = sd * rng.standard_normal()
            u = rng.random()
            eta = s.alpha + s.beta[None, :] * s.kappa[t] + s.beta_pop * s.kappa_pop[:, t, None] + s.nu[:, :, t]
            dll = self._delta_loglik(eta, eta + delta * s.beta[None, :], self.D[:, :, t], self.E[:, :, t],
                                     self.obs[:, :, t])
            if self.exact:
                new = s.kappa - delta / N
                new[t] += delta
                d_ar = -(self._ar_quad(new, eta_k, s.rho) - self._ar_quad(s.kappa, eta_k, s.rho)) / (
                    2.0 * s.sigma2_kappa
                )
                shift = s.beta * (delta / N)
                d_alpha = self._alpha_prior_shift(s.alpha, shift[None, :], slice(None))
                accepted = _accept(dll + d_ar + d_alpha, u)
            else:
                lk = cond.log_kappa_kernel
                d_k = lk(s.kappa[t] + delta, s.kappa, t, eta_k, s.rho, s.sigma2_kappa) - lk(
                    s.kappa[t], s.kappa, t, eta_k, s.rho, s.sigma2_kappa
                )
                accepted = _accept(dll + d_k, u)
            self._record("kappa_common", t, accepted)
            if accepted:
                s.kappa[t] += delta
            K = s.kappa.sum() / N
            s.kappa -= K
            s.alpha += s.beta[None, :] * K

    def _alpha_prior_shift(self, alpha, shift, rows) -> float:
        a, b = self.a_x[rows], self.b_x[rows]
        cur = alpha[rows]
        with np.errstate(over="ignore"):  # a huge proposal gives -inf and is rejected
            return float(np.sum(a * shift - b * (np.exp(cur + shift) - np.exp(cur))))

    def update_kappa_pop(self, s: ModelState, i: int) -> None:
        N = self.N
        rng = self.rng
        eta_k = self.design.eta(s.phi_pop[i])
        rho, s2k = s.rho_pop[i], s.sigma2_kappa_pop[i]
        kp = s.kappa_pop[i]
        for t in range(N):
            sd = self._scale("kappa_pop", (i, t))
            delta = sd * rng.standard_normal()
            u = rng.random()
            eta = s.alpha[i] + s.beta * s.kappa[t] + s.beta_pop[i] * kp[t] + s.nu[i, :, t]
            dll = self._delta_loglik(eta, eta + delta * s.beta_pop[i], self.D[i, :, t], self.E[i, :, t],
                                     self.obs[i, :, t])
            if self.exact:
                new = kp - delta / N
                new[t] += delta
                d_ar = -(self._ar_quad(new, eta_k, rho) - self._ar_quad(kp, eta_k, rho)) / (2.0 * s2k)
                d_alpha = self._alpha_prior_shift(s.alpha, s.beta_pop[i] * (delta / N), i)
                accepted = _accept(dll + d_ar + d_alpha, u)
            else:
                lk = cond.log_kappa_kernel
                d_k = lk(kp[t] + delta, kp, t, eta_k, rho, s2k) - lk(kp[t], kp, t, eta_k, rho, s2k)
                accepted = _accept(dll + d_k, u)
            self._record("kappa_pop", (i, t), accepted)
            if accepted:
                kp[t] += delta
            K = kp.sum() / N
            kp -= K
            s.alpha[i] += s.beta_pop[i] * K

    def update_phi_common(self, s: ModelState) -> None:
        Q = build_precision(s.rho, self.N)
        mean, cov = cond.phi_conditional(
            s.kappa, Q, s.sigma2_kappa, self.design, self.hyper.phi0_array, self.hyper.sigma0_array
        )
        s.phi = _mvn(mean, cov, self.rng)

    def update_rho_common(self, s: ModelState) -> None:
        mean, var = cond.rho_conditional(s.kappa - self.design.eta(s.phi), s.sigma2_kappa, self.hyper.sigma2_rho)
        s.rho = cond.draw_truncated_normal(mean, var, self.rng)

    def update_rho_pop(self, s: ModelState, i: int) -> None:
        mean, var = cond.rho_conditional(
            s.kappa_pop[i] - self.design.eta(s.phi_pop[i]), s.sigma2_kappa_pop[i], self.sigma2_rho_pop[i]
        )
        s.rho_pop[i] = cond.draw_truncated_normal(mean, var, self.rng)

    def update_sigma2_kappa_common(self, s: ModelState) -> None:
        shape, rate = cond.sigma2_kappa_conditional(
            s.kappa - self.design.eta(s.phi), s.rho, self.hyper.a_kappa, self.hyper.b_kappa
        )
        s.sigma2_kappa = float(cond.draw_inverse_gamma(shape, rate, self.rng))

    def update_sigma2_kappa_pop(self, s: ModelState, i: int) -> None:
        slab_sq, count = 0.0, 0
        if self.exact and self.config.spike:
            included = s.w[i] == 1
            slab_sq = float(np.sum(s.phi_pop[i][included] ** 2 / self.slab[i][included]))
            count = int(included.sum())
        shape, rate = cond.sigma2_kappa_conditional(
            s.kappa_pop[i] - self.design.eta(s.phi_pop[i]),
            s.rho_pop[i],
            self.a_kappa_pop[i],
            self.b_kappa_pop[i],
            slab_sq,
            count,
        )
        s.sigma2_kappa_pop[i] = float(cond.draw_inverse_gamma(shape, rate, self.rng))

    def update_spike(self, s: ModelState, i: int) -> None:
        rng = self.rng
        W = self.W
        Q = build_precision(s.rho_pop[i], self.N)
        s2 = s.sigma2_kappa_pop[i]
        c = self.slab[i]
        kp = s.kappa_pop[i]
        phi = s.phi_pop[i]
        for l in (0, 1):
            z = kp - W[:, 1 - l] * phi[1 - l]
            log_r = cond.spike_log_ratio(z, W[:, l], Q, s2, c[l])
            xi = cond.inclusion_probability(s.p[i], log_r)
            s.w[i, l] = 1 if rng.random() < xi else 0
            if self.exact:
                if s.w[i, l]:
                    m, v = cond.slab_conditional(z, W[:, l], Q, s2, c[l])
                    phi[l] = m + math.sqrt(v) * rng.standard_normal()
                else:
                    phi[l] = 0.0
        w1, w2 = s.w[i]
        if w1 and w2:
            mean, cov = cond.joint_slab_conditional(kp, Q, s2, c, self.design)
            phi[:] = _mvn(mean, cov, rng)
        elif w1 or w2:
            l = 0 if w1 else 1
            if self.exact:
                m, v = cond.slab_conditional(kp, W[:, l], Q, s2, c[l])
            else:
                mean, cov = cond.joint_slab_conditional(kp, Q, s2, c, self.design)
                m, v = mean[l], cov[l, l]
            phi[1 - l] = 0.0
            phi[l] = m + math.sqrt(v) * rng.standard_normal()
        else:
            phi[:] = 0.0
        a, b = cond.p_conditional(s.w[i], self.hyper.a_p, self.hyper.b_p)
        s.p[i] = min(max(rng.beta(a, b), cond.XI_FLOOR), 1.0 - cond.XI_FLOOR)

    def update_population_time(self, s: ModelState) -> None:
        for i in range(self.n):
            if self.config.spike:
                self.update_spike(s, i)
            self.update_kappa_pop(s, i)
            self.update_rho_pop(s, i)
            self.update_sigma2_kappa_pop(s, i)

    # -- overdispersion --

    def update_overdispersion(self, s: ModelState) -> None:
        rng = self.rng
        for i in range(self.n):
            shape, rate = cond.sigma2_nu_conditional(s.nu[i], self.a_mu[i], self.b_mu[i])
            s.sigma2_nu[i] = float(cond.draw_inverse_gamma(shape, rate, rng))
        shape3 = s.nu.shape
        sd = self.tuner.sd["nu"] if self.tuner is not None else np.full(shape3, 0.1)
        step = sd * rng.standard_normal(shape3)
        u = rng.random(shape3)
        eta = log_mu_grid(s)
        eta_new = eta + step
        prop = s.nu + step
        s2 = s.sigma2_nu[:, None, None]
        with np.errstate(over="ignore"):
            log_ratio = (
                self.D * step
                - self.E * (np.exp(np.minimum(eta_new, LOG_MU_MAX)) - np.exp(np.minimum(eta, LOG_MU_MAX)))
                - (prop * prop - s.nu * s.nu) / (2.0 * s2)
            )
        log_ratio = np.where(eta_new > LOG_MU_MAX, -np.inf, log_ratio)
        accept = (np.log(u) <= log_ratio) & self.obs
        s.nu[accept] = prop[accept]
        n_acc = int(accept.sum())
        n_att = int(self.obs.sum())
        self.counts["nu"] += (n_acc, n_att)
        if self.tuner is not None:
            self.tuner.record_all("nu", accept.astype(float), self.obs.astype(float))
        if not self.all_observed:
            masked = ~self.obs
            draws = rng.standard_normal(int(masked.sum()))
            s.nu[masked] = draws * np.sqrt(np.broadcast_to(s2, shape3)[masked])

    def update_trend_shift(self, s: ModelState) -> None:
        """Move a linear trend between the common and population indices.

        kappa gains ``delta * v`` (``v`` the centred calendar years) and each
        kappa_pop[i] loses ``c_i * delta * v`` with ``c_i = beta . beta_pop[i]``,
        so the log-rates change only through ``beta - c_i beta_pop[i]``. The
        drifts follow (included components only), keeping the AR residuals
        of fully included populations fixed. Given the loadings and the
        indicators the map is a translation, so a symmetric random walk on
        ``delta`` needs no Jacobian. Its scale is the tuned multiplier over
        the square root of a curvature built only from quantities the move
        leaves alone (observed counts, loadings, variances, rho, w), which
        keeps the proposal symmetric. Skipped by the published scheme.
        """
        if not self.exact:
            return
        for _ in range(TREND_SHIFT_TRIES):
            self._trend_shift_once(s)

    def _trend_shift_once(self, s: ModelState) -> None:
        v = self.design.centered_time
        step = np.array([-self.design.mean_time, 1.0])
        c = s.beta_pop @ s.beta
        load = s.beta[None, :] - c[:, None] * s.beta_pop
        s0inv = np.linalg.inv(self.hyper.sigma0_array)
        curv = float(np.sum(self.D * load[:, :, None] ** 2 * (v * v)[None, None, :])) + step @ s0inv @ step
        for i in range(self.n):
            s2 = s.sigma2_kappa_pop[i]
            curv += c[i] ** 2 * float(np.sum(s.w[i] * step**2 / self.slab[i])) / s2
            if not s.w[i].all():
                curv += c[i] ** 2 * self._ar_quad(v, 0.0, s.rho_pop[i]) / s2
        delta = self._scale("trend_shift", 0) / math.sqrt(curv) * self.rng.standard_normal()
        u = self.rng.random()
        eta = log_mu_grid(s)
        dll = self._delta_loglik(eta, eta + delta * load[:, :, None] * v[None, None, :], self.D, self.E, self.obs)
        # common drift prior; the AR residual of kappa is unchanged
        r_old = s.phi - self.hyper.phi0_array
        r_new = r_old + delta * step
        d_prior = -0.5 * (r_new @ s0inv @ r_new - r_old @ s0inv @ r_old)
        new_phi_pop = s.phi_pop - (c * delta)[:, None] * step[None, :] * s.w
        for i in range(self.n):
            s2 = s.sigma2_kappa_pop[i]
            slab = self.slab[i]
            d_prior -= np.sum(s.w[i] * (new_phi_pop[i] ** 2 - s.phi_pop[i] ** 2) / (2.0 * slab * s2))
            if not s.w[i].all():
                kp_new = s.kappa_pop[i] - c[i] * delta * v
                d_prior -= (self._ar_quad(kp_new, self.design.eta(new_phi_pop[i]), s.rho_pop[i])
                            - self._ar_quad(s.kappa_pop[i], self.design.eta(s.phi_pop[i]), s.rho_pop[i])) / (2.0 * s2)
        accepted = _accept(dll + d_prior, u)
        self._record("trend_shift", 0, accepted)
        if accepted:
            s.kappa += delta * v
            s.phi += delta * step
            s.kappa_pop -= (c * delta)[:, None] * v[None, :]
            s.phi_pop[...] = new_phi_pop

    def update_sigma2_beta(self, s: ModelState) -> None:
        shape, rate = cond.sigma2_beta_conditional(s.beta, self.hyper.a_beta, self.hyper.b_beta)
        s.sigma2_beta = float(cond.draw_inverse_gamma(shape, rate, self.rng))
        for i in range(self.n):
            shape, rate = cond.sigma2_beta_conditional(s.beta_pop[i], self.a_beta_pop[i], self.b_beta_pop[i])
            s.sigma2_beta_pop[i] = float(cond.draw_inverse_gamma(shape, rate, self.rng))

    def run_block(self, name: str, s: ModelState) -> None:
        if name == "beta_pop":
            for i in range(self.n):
                self.update_beta_pop(s, i)
        elif name == "overdispersion":
            if self.config.overdispersion:
                self.update_overdispersion(s)
        else:
            getattr(self, "update_" + name)(s)

    def sweep(self, s: ModelState, iteration: int = 0) -> ModelState:
        for name in self.config.update_order:
            try:
                self.run_block(name, s)
            except (InvalidStateError, RenormalizationError, cond.DomainError, FloatingPointError, ValueError,
                    np.linalg.LinAlgError) as exc:
                raise SamplerError(iteration, name, exc) from exc
        return s


def _mvn(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    return mean + chol @ rng.standard_normal(len(mean))


# -- single-block entry points ---------------------------------------------


def _one_off(dataset, hyper, rng, tuner=None, scheme="exact", **kw) -> GibbsSweep:
    cfg = SamplerConfig(total=1, burn_in=0, scheme=scheme, adapt=False, **kw)
    return GibbsSweep(dataset, hyper, cfg, rng, tuner)


def update_alpha(state, dataset, hyper, rng, scheme="exact", alpha_shape_shift=None):
    _one_off(dataset, hyper, rng, scheme=scheme, alpha_shape_shift=alpha_shape_shift).update_alpha(state)
    return state


def update_beta_common(state, dataset, hyper, tuner, rng, scheme="exact"):
    _one_off(dataset, hyper, rng, tuner, scheme).update_beta_common(state)
    return state


def update_beta_pop(state, dataset, hyper, tuner, rng, i, scheme="exact"):
    _one_off(dataset, hyper, rng, tuner, scheme).update_beta_pop(state, i)
    return state


def update_kappa_common(state, dataset, hyper, tuner, rng, scheme="exact"):
    _one_off(dataset, hyper, rng, tuner, scheme).update_kappa_common(state)
    return state


def update_kappa_pop(state, dataset, hyper, tuner, rng, i, scheme="exact"):
    _one_off(dataset, hyper, rng, tuner, scheme).update_kappa_pop(state, i)
    return state


def update_overdispersion(state, dataset, hyper, tuner, rng):
    _one_off(dataset, hyper, rng, tuner).update_overdispersion(state)
    return state


def update_spike(state, dataset, hyper, rng, i, scheme="exact"):
    _one_off(dataset, hyper, rng, scheme=scheme).update_spike(state, i)
    return state


# -- the chain -------------------------------------------------------------


STORED_BLOCKS = (
    "alpha", "beta", "beta_pop", "sigma2_beta", "sigma2_beta_pop", "kappa", "kappa_pop", "phi", "phi_pop",
    "rho", "rho_pop", "sigma2_kappa", "sigma2_kappa_pop", "w", "p", "nu", "sigma2_nu",
)


def stored_blocks(config: SamplerConfig) -> tuple[str, ...]:
    skip = set()
    if not config.spike:
        skip |= {"w", "p"}
    if not config.overdispersion:
        skip |= {"nu", "sigma2_nu"}
    return tuple(b for b in STORED_BLOCKS if b not in skip)


def chain_rng(seed: int, chain: int = 0) -> np.random.Generator:
    """Independent PCG64 stream per (seed, chain index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(chain)])))


def run_chain(
    dataset: MortalityDataset,
    hyper: Hyperparams,
    config: SamplerConfig,
    initial: ModelState | None = None,
    chain: int = 0,
    on_sweep: Callable[[int, ModelState], None] | None = None,
) -> ChainOutput:
    """Run ``config.total`` sweeps and keep thinned post-burn-in draws.
    ``on_sweep(iteration, state)`` is called after every sweep (read-only use).
    """
    rng = chain_rng(config.seed, chain)
    state = initial.copy() if initial is not None else initialize_state(dataset, hyper, rng, spike=config.spike)
    state = _prepare(state, config)
    bad = state.constraint_violations()
    if bad:
        raise InvalidStateError("initial state violates constraints: " + "; ".join(bad))

    scales = curvature_scales(state, dataset)
    for k, v in (config.proposal_scales or {}).items():
        scales[k] = np.broadcast_to(np.asarray(v, dtype=float), scales[k].shape).copy()
    tuner = MhTuner(scales, config.adapt_window, config.target_band, enabled=config.adapt and config.burn_in > 0)
    sampler = GibbsSweep(dataset, hyper, config, rng, tuner)

    blocks = stored_blocks(config)
    n_keep = config.n_draws
    store = {b: np.empty((n_keep,) + np.shape(getattr(state, b)),
                         dtype=np.int8 if b == "w" else float) for b in blocks}
    w_trace = np.empty((config.total - config.burn_in, dataset.n, 2), dtype=np.int8)
    change_trace = np.empty(config.total, dtype=np.int64)
    burn_counts = None
    k = 0
    t0 = time.perf_counter()
    for j in range(config.total):
        if j == config.burn_in:
            tuner.freeze()
            burn_counts = {f: c.copy() for f, c in sampler.counts.items()}
            for c in sampler.counts.values():
                c[...] = 0
        sampler.sweep(state, j)
        if j < config.burn_in:
            tuner.end_iteration(j)
        change_trace[j] = tuner.changes
        if j >= config.burn_in:
            w_trace[j - config.burn_in] = state.w
            if (j - config.burn_in + 1) % config.thin == 0 and k < n_keep:
                for b in blocks:
                    store[b][k] = getattr(state, b)
                k += 1
        if on_sweep is not None:
            on_sweep(j, state)
    wall = time.perf_counter() - t0
    if burn_counts is None:
        burn_counts = {f: np.zeros(2, dtype=np.int64) for f in FAMILIES}
    return ChainOutput(
        draws=store,
        w_trace=w_trace,
        acceptance={f: (int(c[0]), int(c[1])) for f, c in sampler.counts.items()},
        acceptance_burn_in={f: (int(c[0]), int(c[1])) for f, c in burn_counts.items()},
        proposal_scales={f: v.copy() for f, v in tuner.sd.items()},
        scale_change_trace=change_trace,
        populations=list(dataset.populations),
        ages=np.asarray(dataset.ages),
        years=np.asarray(dataset.years),
        config=config,
        hyper=hyper,
        seed=config.seed,
        wall_seconds=wall,
        metadata={"chain": chain, "scheme": config.scheme, "variant": config.variant},
    )
