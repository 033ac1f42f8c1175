"""Posterior predictive projection of time indices, rates and death counts.

Each stored draw is pushed through the AR(1)-with-drift recursion on the
calendar-year scale used by the fit, then turned into rates and Poisson
counts. Draw ``j`` always uses the random stream ``SeedSequence([seed, j])``
so results do not depend on how draws are spread over workers.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import MortalityDataset
from .model import ModelState

POISSON_MEAN_MAX = 1e12
OVERDISPERSION_MODES = ("resample", "zero")
_STATE_FIELDS = (
    "alpha", "beta", "beta_pop", "sigma2_beta", "sigma2_beta_pop", "kappa", "kappa_pop", "phi", "phi_pop",
    "rho", "rho_pop", "sigma2_kappa", "sigma2_kappa_pop", "w", "p", "nu", "sigma2_nu",
)


def _ar_forward(last: float, t_last: int, phi, rho: float, sigma2: float, H: int, rng) -> np.ndarray:
    # k_t = eta_t + rho (k_{t-1} - eta_{t-1}) + e_t, eta_t = phi_1 + phi_2 t
    sd = math.sqrt(max(sigma2, 0.0))
    eps = rng.standard_normal(H) * sd
    out = np.empty(H)
    prev, eta_prev = last, phi[0] + phi[1] * t_last
    for h in range(H):
        eta = phi[0] + phi[1] * (t_last + h + 1)
        prev = eta + rho * (prev - eta_prev) + eps[h]
        out[h] = prev
        eta_prev = eta
    return out


def forecast_kappa(state: ModelState, years, H: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Future common path (H,) and population paths (n, H) for one posterior draw.

    ``years`` are the training calendar years; the drift is evaluated at the
    same calendar coordinate the fit used.
    """
    if H < 0:
        raise ValueError("horizon must be non-negative")
    t_last = int(np.asarray(years)[-1])
    common = _ar_forward(state.kappa[-1], t_last, state.phi, state.rho, state.sigma2_kappa, H, rng)
    pops = np.empty((state.n, H))
    for i in range(state.n):
        pops[i] = _ar_forward(state.kappa_pop[i, -1], t_last, state.phi_pop[i], state.rho_pop[i],
                              state.sigma2_kappa_pop[i], H, rng)
    return common, pops


def predictive_log_rates(state: ModelState, kappa_future, kappa_pop_future, rng: np.random.Generator,
                         mode: str = "resample") -> np.ndarray:
    """log mu on training plus future years, shape (n, M, N + H)."""
    if mode not in OVERDISPERSION_MODES:
        raise ValueError(f"overdispersion mode must be one of {OVERDISPERSION_MODES}")
    kappa = np.concatenate([state.kappa, kappa_future])
    kappa_pop = np.concatenate([state.kappa_pop, kappa_pop_future], axis=1)
    H = len(kappa_future)
    out = (
        state.alpha[:, :, None]
        + state.beta[None, :, None] * kappa[None, None, :]
        + state.beta_pop[:, :, None] * kappa_pop[:, None, :]
    )
    out[:, :, : state.N] += state.nu
    if mode == "resample" and H:
        sd = np.sqrt(np.maximum(state.sigma2_nu, 0.0))[:, None, None]
        out[:, :, state.N:] += sd * rng.standard_normal((state.n, state.M, H))
    return out


def predictive_rates(state: ModelState, years, kappa_future, kappa_pop_future, rng: np.random.Generator,
                     mode: str = "resample") -> np.ndarray:
    """mu over training and future years; training cells use the stored nu.

    Future cells draw fresh nu ~ N(0, sigma2_nu) (``mode="resample"``) or set
    nu = 0 (``mode="zero"``).
    """
    if len(years) != state.N:
        raise ValueError("years do not match the state's time dimension")
    return np.exp(predictive_log_rates(state, kappa_future, kappa_pop_future, rng, mode))


def predictive_deaths(mu: np.ndarray, exposures: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One Poisson count per cell with mean ``exposures * mu``."""
    mean = np.asarray(exposures, dtype=float) * np.asarray(mu, dtype=float)
    if np.any(~np.isfinite(mean)) or np.any(mean > POISSON_MEAN_MAX):
        raise OverflowError("predictive Poisson mean exceeds 1e12; the draw is implausible")
    return rng.poisson(mean)


def _window_size(n: int, level: float) -> int:
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    k = math.ceil(level * n - 1e-9)
    if n < k + 1:
        raise ValueError(f"need more than {k} samples for a {level:g} HPD interval, got {n}")
    return max(k, 1)


def hpd_interval(samples, level: float = 0.95) -> tuple[float, float]:
    """Shortest window of ceil(level*n) sorted samples; ties go to the lowest start."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    k = _window_size(x.size, level)
    widths = x[k - 1:] - x[: x.size - k + 1]
    j = int(np.argmin(widths))
    return float(x[j]), float(x[j + k - 1])


def hpd_bounds(samples: np.ndarray, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise :func:`hpd_interval` over axis 0 of a 2-d array."""
    x = np.sort(np.asarray(samples, dtype=float), axis=0)
    n = x.shape[0]
    k = _window_size(n, level)
    widths = x[k - 1:] - x[: n - k + 1]
    j = np.argmin(widths, axis=0)
    cols = np.arange(x.shape[1])
    return x[j, cols], x[j + k - 1, cols]


def frozen_exposures(dataset: MortalityDataset, H: int) -> np.ndarray:
    """Training exposures extended by repeating each cell's last observed value."""
    E = np.where(dataset.observed, dataset.exposures, np.nan)
    last = np.full(E.shape[:2], np.nan)
    for t in range(dataset.N):
        col = E[:, :, t]
        last = np.where(np.isfinite(col), col, last)
    if np.any(~np.isfinite(last)):
        raise ValueError("some (population, age) cells have no observed exposure to freeze")
    E = np.where(np.isfinite(E), E, 0.0)
    return np.concatenate([E, np.repeat(last[:, :, None], H, axis=2)], axis=2)


@dataclass
class ForecastResult:
    """Predictive draws over training plus ``horizon`` future years.

    Arrays have the stored draw as their leading axis. Masked training cells
    carry zero exposure and so zero simulated deaths.
    """

    horizon: int
    level: float
    populations: list[str]
    ages: np.ndarray
    years: np.ndarray
    kappa: np.ndarray
    kappa_pop: np.ndarray
    log_mu: np.ndarray
    deaths: np.ndarray
    exposures: np.ndarray
    mode: str = "resample"

    @property
    def n_train(self) -> int:
        return len(self.years) - self.horizon

    def summary(self, name: str, level: float | None = None) -> pd.DataFrame:
        """Median and HPD bounds per cell for ``kappa``, ``kappa_pop``, ``log_mu`` or ``deaths``."""
        level = self.level if level is None else level
        arr = np.asarray(getattr(self, name), dtype=float)
        flat = arr.reshape(arr.shape[0], -1)
        lo, hi = hpd_bounds(flat, level)
        med = np.median(flat, axis=0)
        future = self.years > self.years[self.n_train - 1]
        if name == "kappa":
            keys = {"year": self.years, "future": future}
        elif name == "kappa_pop":
            keys = {
                "population": np.repeat(self.populations, len(self.years)),
                "year": np.tile(self.years, len(self.populations)),
                "future": np.tile(future, len(self.populations)),
            }
        else:
            P, A, T = np.meshgrid(np.arange(len(self.populations)), self.ages, self.years, indexing="ij")
            keys = {
                "population": np.asarray(self.populations)[P.ravel()],
                "age": A.ravel(),
                "year": T.ravel(),
                "future": T.ravel() > self.years[self.n_train - 1],
            }
        df = pd.DataFrame(keys)
        df["median"], df["hpd_lo"], df["hpd_hi"] = med, lo, hi
        return df


def _state_from_draws(draws: dict[str, np.ndarray], j: int, n: int, M: int, N: int) -> ModelState:
    d = {}
    for name in _STATE_FIELDS:
        if name in draws:
            d[name] = np.array(draws[name][j])
    for name in ("sigma2_beta", "sigma2_kappa", "rho"):
        d[name] = float(d[name])
    d.setdefault("w", np.zeros((n, 2), dtype=np.int8))
    d.setdefault("p", np.full(n, 0.5))
    d.setdefault("nu", np.zeros((n, M, N)))
    d.setdefault("sigma2_nu", np.zeros(n))
    return ModelState(**d)


def forecast(
    draws: dict[str, np.ndarray],
    dataset: MortalityDataset,
    horizon: int,
    level: float = 0.95,
    seed: int = 0,
    mode: str = "resample",
    exposures: np.ndarray | None = None,
    threads: int = 1,
) -> ForecastResult:
    """Posterior predictive draws for every stored state.

    ``exposures`` (n, M, N + horizon) overrides the default, which repeats the
    last observed training exposure into the future.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if mode not in OVERDISPERSION_MODES:
        raise ValueError(f"overdispersion mode must be one of {OVERDISPERSION_MODES}")
    n, M, N = dataset.n, dataset.M, dataset.N
    H = int(horizon)
    E = frozen_exposures(dataset, H) if exposures is None else np.asarray(exposures, dtype=float)
    if E.shape != (n, M, N + H):
        raise ValueError(f"exposures must have shape {(n, M, N + H)}")
    K = next(iter(draws.values())).shape[0]
    kappa = np.empty((K, N + H))
    kappa_pop = np.empty((K, n, N + H))
    log_mu = np.empty((K, n, M, N + H))
    deaths = np.empty((K, n, M, N + H), dtype=np.int64)

    def one(j: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), j]))
        s = _state_from_draws(draws, j, n, M, N)
        f, fp = forecast_kappa(s, dataset.years, H, rng)
        lm = predictive_log_rates(s, f, fp, rng, mode)
        kappa[j] = np.concatenate([s.kappa, f])
        kappa_pop[j] = np.concatenate([s.kappa_pop, fp], axis=1)
        log_mu[j] = lm
        deaths[j] = predictive_deaths(np.exp(lm), E, rng)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, range(K)))
    else:
        for j in range(K):
            one(j)
    years = np.concatenate([dataset.years, dataset.years[-1] + np.arange(1, H + 1)])
    return ForecastResult(
        horizon=H, level=level, populations=list(dataset.populations), ages=np.asarray(dataset.ages),
        years=years, kappa=kappa, kappa_pop=kappa_pop, log_mu=log_mu, deaths=deaths, exposures=E, mode=mode,
    )
