"""Chain health summaries and the getting-it-right joint-distribution check."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import MortalityDataset
from .model import Hyperparams, ModelState
from .sampler import FAMILIES, ChainOutput, GibbsSweep, MhTuner, SamplerConfig, chain_rng
from .synth import sample_prior, simulate_counts

STRUCTURES = {(0, 0): "none", (1, 0): "intercept-only", (0, 1): "slope-only", (1, 1): "full"}
GIR_MAX_M = 5
GIR_MAX_N = 8


# -- chain summaries -------------------------------------------------------


def inclusion_proportions(chain: ChainOutput) -> np.ndarray:
    """Share of post-burn-in iterations with each w_l^(i) = 1, shape (n, 2)."""
    if chain.w_trace.shape[0] == 0:
        raise ValueError("chain holds no post-burn-in iterations")
    return chain.w_trace.mean(axis=0)


def reduce_model(proportions, threshold: float = 0.5) -> list[str]:
    """Drift structure per population: component l kept iff its proportion exceeds ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    props = np.atleast_2d(np.asarray(proportions, dtype=float))
    return [STRUCTURES[(int(a > threshold), int(b > threshold))] for a, b in props]


def acceptance_report(chain: ChainOutput, burn_in: bool = False) -> dict[str, float]:
    """Accepted/attempted per MH family; families never attempted are left out."""
    counts = chain.acceptance_burn_in if burn_in else chain.acceptance
    return {f: acc / att for f, (acc, att) in counts.items() if att > 0}


def lag1_autocorrelation(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    if x.size < 3:
        return float("nan")
    d = x - x.mean()
    denom = float(np.dot(d, d))
    if denom == 0.0:
        return float("nan")
    return float(np.dot(d[1:], d[:-1]) / denom)


def trace_summary(chain: ChainOutput) -> list[dict]:
    """Mean, sd and lag-1 autocorrelation of every scalar in the stored draws."""
    from .io import scalar_columns

    rows = []
    for col in scalar_columns(chain):
        values = col.values
        rows.append(
            {
                "parameter": col.name,
                "block": col.block,
                "mean": float(values.mean()),
                "sd": float(values.std(ddof=1)) if values.size > 1 else float("nan"),
                "lag1": lag1_autocorrelation(values),
            }
        )
    return rows


@dataclass
class DiagnosticsReport:
    acceptance: dict[str, float]
    acceptance_burn_in: dict[str, float]
    inclusion: np.ndarray | None
    structures: list[str] | None
    traces: list[dict]
    populations: list[str]
    threshold: float = 0.5
    gir: "GirReport | None" = None

    def to_text(self) -> str:
        lines = ["acceptance rates (post burn-in)"]
        for fam in FAMILIES:
            if fam in self.acceptance:
                lines.append(f"  {fam:<14s} {self.acceptance[fam]:.3f}")
        if self.inclusion is not None:
            lines.append(f"drift inclusion proportions (threshold {self.threshold:g})")
            for pop, (w1, w2), structure in zip(self.populations, self.inclusion, self.structures):
                lines.append(f"  {pop:<10s} intercept {w1:.3f}  slope {w2:.3f}  -> {structure}")
        worst = sorted((r for r in self.traces if np.isfinite(r["lag1"])), key=lambda r: -r["lag1"])[:5]
        if worst:
            lines.append("highest lag-1 autocorrelation")
            for r in worst:
                lines.append(f"  {r['parameter']:<28s} {r['lag1']:.3f}")
        if self.gir is not None:
            lines.append(self.gir.to_text())
        return "\n".join(lines) + "\n"

    def to_rows(self) -> list[dict]:
        rows = []
        for fam, rate in self.acceptance.items():
            rows.append({"section": "acceptance", "name": fam, "value": rate})
        if self.inclusion is not None:
            for pop, props in zip(self.populations, self.inclusion):
                for l, v in zip(("intercept", "slope"), props):
                    rows.append({"section": "inclusion", "name": f"{pop}:{l}", "value": float(v)})
        for r in self.traces:
            for key in ("mean", "sd", "lag1"):
                rows.append({"section": f"trace_{key}", "name": r["parameter"], "value": r[key]})
        return rows


def diagnose_chain(chain: ChainOutput, threshold: float | None = None) -> DiagnosticsReport:
    threshold = chain.hyper.inclusion_threshold if threshold is None else threshold
    inclusion = structures = None
    if chain.config.spike:
        inclusion = inclusion_proportions(chain)
        structures = reduce_model(inclusion, threshold)
    return DiagnosticsReport(
        acceptance=acceptance_report(chain),
        acceptance_burn_in=acceptance_report(chain, burn_in=True),
        inclusion=inclusion,
        structures=structures,
        traces=trace_summary(chain),
        populations=list(chain.populations),
        threshold=threshold,
    )


# -- getting it right ------------------------------------------------------


def gir_hyperparams() -> Hyperparams:
    """Proper, moderately informative priors so the joint-distribution check has finite moments."""
    return Hyperparams(
        a_x=3.0, b_x=30.0,
        a_beta=4.0, b_beta=0.06, a_beta_pop=4.0, b_beta_pop=0.3,
        phi0=(0.0, 0.0), sigma0=((0.2, 0.0), (0.0, 0.02)),
        sigma2_rho=0.25, sigma2_rho_pop=0.1,
        a_kappa=4.0, b_kappa=0.6, a_kappa_pop=4.0, b_kappa_pop=0.6,
        a_mu=5.0, b_mu=0.08, a_p=2.0, b_p=2.0, slab_scale=(1.0, 1.0),
    )


GIR_SCALES = {
    "beta_common": 0.15, "beta_pop": 0.3, "kappa_common": 0.5, "kappa_pop": 0.5, "nu": 0.3, "trend_shift": 2.4,
}


@dataclass
class GirConfig:
    M: int = 3
    N: int = 5
    n: int = 2
    sweeps: int = 20000
    seed: int = 0
    exposure: float = 100.0
    scheme: str = "exact"
    alpha_shape_shift: float | None = None
    spike: bool = True
    overdispersion: bool = True
    batches: int = 50
    hyper: Hyperparams = field(default_factory=gir_hyperparams)
    proposal_scales: dict = field(default_factory=lambda: dict(GIR_SCALES))

    def __post_init__(self):
        if self.M > GIR_MAX_M or self.N > GIR_MAX_N:
            raise ValueError(
                f"getting-it-right needs small dims (M <= {GIR_MAX_M}, N <= {GIR_MAX_N}); "
                f"got M={self.M}, N={self.N}. Use e.g. --dims 3,5,2"
            )
        if self.sweeps < 2 * self.batches:
            raise ValueError("need at least two sweeps per batch")


def gir_statistics(state: ModelState, deaths: np.ndarray | None = None) -> tuple[list[str], list[str], np.ndarray]:
    """(names, families, values) of the scalar functions compared by the check."""
    names, fams, vals = [], [], []

    def add(family, name, value):
        names.append(name)
        fams.append(family)
        vals.append(float(value))

    def moments(family, label, arr):
        for idx, v in np.ndenumerate(np.asarray(arr, dtype=float)):
            tag = ",".join(map(str, idx))
            add(family, f"{label}[{tag}]", v)
            add(family, f"{label}[{tag}]^2", v * v)

    moments("alpha", "alpha", state.alpha)
    moments("beta", "beta", state.beta)
    moments("beta", "beta_pop", state.beta_pop)
    moments("kappa", "kappa", state.kappa)
    moments("kappa", "kappa_pop", state.kappa_pop)
    add("kappa", "kappa_lag1", np.mean(state.kappa[1:] * state.kappa[:-1]))
    for i in range(state.n):
        add("kappa", f"kappa_pop_lag1[{i}]", np.mean(state.kappa_pop[i, 1:] * state.kappa_pop[i, :-1]))
    moments("phi", "phi", state.phi)
    moments("phi", "phi_pop", state.phi_pop)
    moments("rho", "rho", [state.rho])
    moments("rho", "rho_pop", state.rho_pop)
    moments("variance", "log_sigma2_beta", [math.log(state.sigma2_beta)])
    moments("variance", "log_sigma2_beta_pop", np.log(state.sigma2_beta_pop))
    moments("variance", "log_sigma2_kappa", [math.log(state.sigma2_kappa)])
    moments("variance", "log_sigma2_kappa_pop", np.log(state.sigma2_kappa_pop))
    moments("variance", "log_sigma2_nu", np.log(state.sigma2_nu))
    for idx, v in np.ndenumerate(state.w):
        add("w", f"w[{idx[0]},{idx[1]}]", v)
    moments("p", "p", state.p)
    for i in range(state.n):
        add("nu", f"nu_sq[{i}]", np.mean(state.nu[i] ** 2))
    if deaths is not None:
        for i in range(state.n):
            add("data", f"deaths_mean[{i}]", np.mean(deaths[i]))
    return names, fams, np.asarray(vals)


def batch_mcse(x: np.ndarray, batches: int = 50) -> np.ndarray:
    """Monte-Carlo standard error of column means by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    size = x.shape[0] // batches
    b = x[: size * batches].reshape(batches, size, -1).mean(axis=1)
    return b.std(axis=0, ddof=1) / math.sqrt(batches)


@dataclass
class GirReport:
    names: list[str]
    families: list[str]
    z: np.ndarray
    mean_a: np.ndarray
    mean_b: np.ndarray
    mcse_a: np.ndarray
    mcse_b: np.ndarray
    label_a: str
    label_b: str
    seconds: float
    skipped: list[str]

    def fraction_below(self, bound: float = 4.0) -> float:
        return float(np.mean(np.abs(self.z) < bound))

    def max_abs_z(self, family: str | None = None) -> float:
        mask = np.ones(len(self.z), bool) if family is None else np.array([f == family for f in self.families])
        return float(np.max(np.abs(self.z[mask]))) if mask.any() else 0.0

    def flagged(self, bound: float = 4.0) -> list[tuple[str, float]]:
        return [(n, float(z)) for n, z in zip(self.names, self.z) if abs(z) >= bound]

    def rows(self) -> list[dict]:
        return [
            {"statistic": n, "family": f, "mean_" + self.label_a: a, "mean_" + self.label_b: b,
             "mcse_" + self.label_a: sa, "mcse_" + self.label_b: sb, "z": z}
            for n, f, a, b, sa, sb, z in zip(self.names, self.families, self.mean_a, self.mean_b,
                                            self.mcse_a, self.mcse_b, self.z)
        ]

    def to_text(self) -> str:
        lines = [
            f"getting-it-right: {self.label_a} vs {self.label_b}, {len(self.z)} statistics",
            f"  share |z| < 4: {self.fraction_below(4.0):.3f}   share |z| < 2: {self.fraction_below(2.0):.3f}",
            f"  max |z|: {self.max_abs_z():.2f}",
        ]
        fams = sorted(set(self.families))
        for fam in fams:
            lines.append(f"  {fam:<9s} max |z| {self.max_abs_z(fam):6.2f}")
        for name, z in self.flagged():
            lines.append(f"  flagged {name}: z = {z:.2f}")
        return "\n".join(lines)


def marginal_conditional(cfg: GirConfig, rng: np.random.Generator, draws: int | None = None) -> tuple[list, list, np.ndarray]:
    """Independent (theta, data) draws from the prior and the likelihood."""
    draws = cfg.sweeps if draws is None else draws
    years = np.arange(1, cfg.N + 1)
    E = np.full((cfg.n, cfg.M, cfg.N), cfg.exposure)
    rows = []
    names = fams = None
    for _ in range(draws):
        state, D = _prior_with_data(cfg, years, E, rng)
        names, fams, v = gir_statistics(state, D)
        rows.append(v)
    return names, fams, np.array(rows)


def _prior_with_data(cfg, years, E, rng, retries: int = 100):
    for _ in range(retries):
        state, _ = sample_prior(cfg.hyper, cfg.M, cfg.N, cfg.n, years, rng,
                                spike=cfg.spike, overdispersion=cfg.overdispersion)
        try:
            return state, simulate_counts(state, E, rng)
        except RuntimeError:
            continue
    raise RuntimeError("prior draws keep producing non-finite data; retry cap reached")


def successive_conditional(cfg: GirConfig, rng: np.random.Generator) -> tuple[list, list, np.ndarray, dict]:
    """Alternate one sampler sweep with a fresh data draw given the current parameters.

    Also returns the acceptance rate of each MH family over the run.
    """
    years = np.arange(1, cfg.N + 1)
    E = np.full((cfg.n, cfg.M, cfg.N), cfg.exposure)
    state, D = _prior_with_data(cfg, years, E, rng)
    ds = MortalityDataset(
        ages=np.arange(cfg.M), years=years, populations=tuple(f"P{i + 1}" for i in range(cfg.n)),
        deaths=D, exposures=E, missing=np.zeros(E.shape, bool),
    )
    config = SamplerConfig(
        total=1, burn_in=0, scheme=cfg.scheme, adapt=False, alpha_shape_shift=cfg.alpha_shape_shift,
        spike=cfg.spike, overdispersion=cfg.overdispersion,
    )
    scales = {
        "beta_common": np.full(cfg.M, cfg.proposal_scales["beta_common"]),
        "beta_pop": np.full((cfg.n, cfg.M), cfg.proposal_scales["beta_pop"]),
        "kappa_common": np.full(cfg.N, cfg.proposal_scales["kappa_common"]),
        "kappa_pop": np.full((cfg.n, cfg.N), cfg.proposal_scales["kappa_pop"]),
        "nu": np.full((cfg.n, cfg.M, cfg.N), cfg.proposal_scales["nu"]),
        "trend_shift": np.full(1, cfg.proposal_scales["trend_shift"]),
    }
    sweep = GibbsSweep(ds, cfg.hyper, config, rng, MhTuner(scales, enabled=False))
    rows = []
    names = fams = None
    for j in range(cfg.sweeps):
        sweep.sweep(state, j)
        D = simulate_counts(state, E, rng)
        sweep.replace_deaths(D)
        names, fams, v = gir_statistics(state, D)
        rows.append(v)
    acceptance = {f: c[0] / c[1] for f, c in sweep.counts.items() if c[1] > 0}
    return names, fams, np.array(rows), acceptance


def compare_samples(names, fams, a: np.ndarray, b: np.ndarray, batches: int, label_a: str, label_b: str,
                    seconds: float = 0.0) -> GirReport:
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    sa, sb = batch_mcse(a, batches), batch_mcse(b, batches)
    se = np.sqrt(sa**2 + sb**2)
    keep = se > 0
    skipped = [n for n, k in zip(names, keep) if not k]
    z = (ma - mb)[keep] / se[keep]
    pick = lambda seq: [s for s, k in zip(seq, keep) if k]
    return GirReport(
        names=pick(names), families=pick(fams), z=z, mean_a=ma[keep], mean_b=mb[keep],
        mcse_a=sa[keep], mcse_b=sb[keep], label_a=label_a, label_b=label_b, seconds=seconds, skipped=skipped,
    )


def getting_it_right(cfg: GirConfig | None = None, self_compare: bool = False) -> GirReport:
    """Compare the marginal-conditional simulator with the successive-conditional one.

    With ``self_compare`` two independent marginal-conditional runs are compared
    instead (the null calibration of the statistic).
    """
    cfg = cfg or GirConfig()
    t0 = time.perf_counter()
    names, fams, a = marginal_conditional(cfg, chain_rng(cfg.seed, 0))
    if self_compare:
        _, _, b = marginal_conditional(cfg, chain_rng(cfg.seed, 1))
        label_b = "marginal2"
    else:
        _, _, b, _ = successive_conditional(cfg, chain_rng(cfg.seed, 1))
        label_b = "successive"
    return compare_samples(names, fams, a, b, cfg.batches, "marginal", label_b, time.perf_counter() - t0)
