"""Sampler plumbing, invariants and small statistical checks."""
from __future__ import annotations

import logging
import math

import numpy as np
import pytest
from helpers import random_state, zero_state
from scipy import integrate

from bplnlc.data import MortalityDataset
from bplnlc.model import Hyperparams, log_mu_grid
from bplnlc.sampler import (
    FAMILIES,
    GibbsSweep,
    InvalidStateError,
    MhTuner,
    SamplerConfig,
    curvature_scales,
    initialize_state,
    mh_accept,
    run_chain,
)
from bplnlc.synth import SynthSpec, example_truth, simulate_dataset


def _dataset(D, E):
    D = np.asarray(D)
    n, M, N = D.shape
    return MortalityDataset(
        ages=np.arange(M), years=np.arange(1, N + 1), populations=tuple(f"P{i}" for i in range(n)),
        deaths=D, exposures=np.broadcast_to(E, D.shape), missing=np.zeros(D.shape, bool),
    )


# -- acceptance rule --------------------------------------------------------


def test_mh_accept_examples():
    assert mh_accept(-3.0, -3.0, 0.999)
    assert mh_accept(0.0, math.log(0.5), 0.4)
    assert not mh_accept(0.0, math.log(0.5), 0.6)
    assert not mh_accept(0.0, -math.inf, 0.0)
    assert mh_accept(-10.0, 5.0, 0.99)


def test_mh_accept_rejects_zero_density_current():
    with pytest.raises(InvalidStateError):
        mh_accept(-math.inf, 0.0, 0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(total=10, burn_in=10)
    with pytest.raises(ValueError):
        SamplerConfig(total=10, burn_in=2, thin=0)
    with pytest.raises(ValueError):
        SamplerConfig(scheme="other")
    with pytest.raises(ValueError):
        SamplerConfig(update_order=("alpha", "nope"))
    assert SamplerConfig(total=100, burn_in=50, thin=5).n_draws == 10
    assert SamplerConfig.for_variant("model2").variant == "model2"


# -- initial state ----------------------------------------------------------


def test_initial_state(small_problem):
    ds, _ = small_problem
    s = initialize_state(ds, Hyperparams())
    assert s.constraint_violations() == []
    assert s.beta.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(np.linalg.norm(s.beta_pop, axis=1), 1.0, atol=1e-15)
    assert abs(s.kappa.sum()) < 1e-10 * ds.N
    assert np.all(s.w == [1, 0]) and np.all(s.phi_pop == 0) and s.rho == 0.5
    assert np.all(s.nu == 0) and np.all(s.p == 0.5)


def test_initial_alpha_with_empty_row():
    D = np.full((1, 3, 4), 7)
    D[0, 1] = 0
    ds = _dataset(D, 200.0)
    s = initialize_state(ds, Hyperparams())
    assert s.alpha[0, 1] == pytest.approx(math.log(0.5 / 200.0))
    assert s.constraint_violations() == []


# -- chain plumbing ---------------------------------------------------------


def test_draw_count_and_shapes(small_problem):
    ds, _ = small_problem
    out = run_chain(ds, Hyperparams(), SamplerConfig(total=100, burn_in=50, thin=5, seed=1))
    assert out.n_draws == 10
    assert out.draws["kappa_pop"].shape == (10, ds.n, ds.N)
    assert out.w_trace.shape == (50, ds.n, 2)
    for k in range(out.n_draws):
        assert out.state(k).constraint_violations() == []


def test_bit_identical_reruns(small_problem):
    ds, _ = small_problem
    cfg = SamplerConfig(total=60, burn_in=20, thin=2, seed=42)
    a = run_chain(ds, Hyperparams(), cfg)
    b = run_chain(ds, Hyperparams(), cfg)
    for name in a.draws:
        assert np.array_equal(a.draws[name], b.draws[name]), name
    assert np.array_equal(a.w_trace, b.w_trace)
    c = run_chain(ds, Hyperparams(), SamplerConfig(total=60, burn_in=20, thin=2, seed=43))
    assert not np.array_equal(a.draws["alpha"], c.draws["alpha"])


def test_constraints_hold_after_every_sweep(small_problem):
    ds, _ = small_problem
    seen = []

    def check(j, s):
        bad = s.constraint_violations(tol=1e-10)
        assert bad == [], (j, bad)
        assert np.all(s.phi_pop[s.w == 0] == 0.0)
        seen.append(j)

    run_chain(ds, Hyperparams(), SamplerConfig(total=200, burn_in=100, seed=3), on_sweep=check)
    assert seen == list(range(200))


def test_spike_coherence_in_stored_states(small_problem):
    ds, _ = small_problem
    out = run_chain(ds, Hyperparams(), SamplerConfig(total=150, burn_in=50, seed=4))
    w, phi = out.draws["w"], out.draws["phi_pop"]
    assert np.all(phi[w == 0] == 0.0)


def test_tuner_frozen_after_burn_in(small_problem):
    ds, _ = small_problem
    out = run_chain(ds, Hyperparams(), SamplerConfig(total=300, burn_in=150, seed=5))
    trace = out.scale_change_trace
    assert np.all(trace[150:] == trace[149])
    assert trace[149] > 0
    for v in out.proposal_scales.values():
        assert np.all(v > 0)


def test_tuner_window_rule():
    tuner = MhTuner({"x": np.array([1.0, 1.0, 1.0])}, window=2, band=(0.2, 0.4))
    for accepted in ([1, 0, 0], [1, 0, 1]):
        tuner.record_all("x", np.array(accepted, float), np.ones(3))
    tuner.end_iteration(0)
    assert np.all(tuner.sd["x"] == 1.0)
    tuner.end_iteration(1)
    # rates 1.0, 0.0, 0.5 over the window
    assert np.allclose(tuner.sd["x"], [1.1, 0.9, 1.1])
    tuner.freeze()
    tuner.end_iteration(3)
    assert np.allclose(tuner.sd["x"], [1.1, 0.9, 1.1])


def test_model2_variant(small_problem):
    ds, _ = small_problem
    out = run_chain(ds, Hyperparams(), SamplerConfig.for_variant("model2", total=80, burn_in=40, seed=6))
    assert "nu" not in out.draws and "w" not in out.draws and "p" not in out.draws
    assert np.all(out.draws["phi_pop"] == 0.0)
    assert np.all(out.w_trace == 0)


def test_published_scheme_runs(small_problem):
    ds, _ = small_problem
    out = run_chain(ds, Hyperparams(), SamplerConfig(total=60, burn_in=30, seed=7, scheme="published"))
    assert out.metadata["scheme"] == "published"
    assert out.acceptance["trend_shift"][1] == 0
    for k in range(out.n_draws):
        assert out.state(k).constraint_violations() == []


def test_shape_fallback_warns(caplog):
    D = np.full((1, 3, 4), 5)
    D[0, 2] = 0
    ds = _dataset(D, 100.0)
    hyper = Hyperparams(a_x=0.5)
    cfg = SamplerConfig(total=3, burn_in=1, seed=0, scheme="published")
    with caplog.at_level(logging.WARNING, logger="bplnlc.sampler"):
        out = run_chain(ds, hyper, cfg)
    assert any("shape" in r.message for r in caplog.records)
    assert np.all(np.isfinite(out.draws["alpha"]))


# -- renormalisation neutrality ---------------------------------------------


def _rejecting_sweep(ds, s, scale=1e6):
    scales = {k: np.full_like(v, scale) for k, v in curvature_scales(s, ds).items()}
    cfg = SamplerConfig(total=1, burn_in=0, adapt=False)
    return GibbsSweep(ds, Hyperparams(), cfg, np.random.default_rng(0), MhTuner(scales, enabled=False))


@pytest.mark.parametrize("block", ["beta_common", "beta_pop", "kappa_common", "kappa_pop"])
def test_renormalisation_leaves_predictor_unchanged(block):
    rng = np.random.default_rng(8)
    s = random_state(rng, n=2, M=4, N=6)
    ds = _dataset(rng.poisson(20, (2, 4, 6)), 1000.0)
    # break one constraint; every (enormous) proposal is rejected, so only the
    # renormalisation acts
    if block == "beta_common":
        s.beta *= 2.5
        s.kappa /= 2.5
    elif block == "beta_pop":
        s.beta_pop[1] *= 0.3
        s.kappa_pop[1] /= 0.3
    elif block == "kappa_common":
        s.kappa += 0.7
        s.alpha -= s.beta[None, :] * 0.7
    else:
        s.kappa_pop[0] -= 1.3
        s.alpha[0] += s.beta_pop[0] * 1.3
    before = log_mu_grid(s)
    sw = _rejecting_sweep(ds, s)
    if block.endswith("pop"):
        getattr(sw, "update_" + block)(s, 1 if block == "beta_pop" else 0)
    else:
        getattr(sw, "update_" + block)(s)
    assert sw.counts[block][0] == 0
    assert np.max(np.abs(log_mu_grid(s) - before)) < 1e-10
    assert s.constraint_violations() == []


def test_trend_shift_keeps_constraints_and_moves_along_loading_gap():
    rng = np.random.default_rng(9)
    s = random_state(rng, n=2, M=4, N=6)
    s.w[:] = 1
    s.phi_pop = rng.normal(size=(2, 2))
    ds = _dataset(rng.poisson(20, (2, 4, 6)), 1000.0)
    scales = {k: np.full_like(v, 0.05) for k, v in curvature_scales(s, ds).items()}
    sw = GibbsSweep(ds, Hyperparams(), SamplerConfig(total=1, burn_in=0), rng, MhTuner(scales, enabled=False))
    c = s.beta_pop @ s.beta
    v = sw.design.centered_time
    before, kappa0 = log_mu_grid(s), s.kappa.copy()
    sw.update_trend_shift(s)
    assert sw.counts["trend_shift"][0] > 0
    d = (s.kappa - kappa0) @ v / (v @ v)
    expected = d * (s.beta[None, :] - c[:, None] * s.beta_pop)[:, :, None] * v[None, None, :]
    assert np.allclose(log_mu_grid(s) - before, expected, atol=1e-12)
    assert s.constraint_violations() == []


# -- Jacobians of the propose-then-renormalise maps ---------------------------


def _numeric_det(f, x, h=1e-6):
    cols = [(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)]
    return abs(np.linalg.det(np.array(cols).T))


@pytest.mark.parametrize("M,N", [(3, 5), (4, 4), (5, 3)])
def test_simplex_map_jacobian(M, N):
    """(beta, kappa, delta) -> (y/B, B kappa, -delta/B), y = beta + delta e_x, on sum constraints."""
    rng = np.random.default_rng(M * 10 + N)
    beta = rng.uniform(0.2, 1, M)
    beta /= beta.sum()
    kappa = rng.normal(size=N)
    kappa -= kappa.mean()
    delta, x = 0.3, 1

    def chart(b, k, d):
        return np.concatenate([b[:-1], k[:-1], [d]])

    def unchart(z):
        b = np.append(z[: M - 1], 1 - z[: M - 1].sum())
        k = np.append(z[M - 1: M + N - 2], -z[M - 1: M + N - 2].sum())
        return b, k, z[-1]

    def move(z):
        b, k, d = unchart(z)
        y = b.copy()
        y[x] += d
        B = y.sum()
        return chart(y / B, k * B, -d / B)

    z0 = chart(beta, kappa, delta)
    assert np.allclose(move(move(z0)), z0)
    B = 1 + delta
    assert _numeric_det(move, z0) == pytest.approx(abs(B) ** (N - M - 2), rel=1e-6)


@pytest.mark.parametrize("M,N", [(3, 5), (4, 6)])
def test_sphere_map_jacobian(M, N):
    """Same map with the L2 norm; volume measured in surface area on the sphere."""
    rng = np.random.default_rng(M + N)
    b0 = rng.uniform(0.2, 1, M)
    b0 /= np.linalg.norm(b0)
    kappa = rng.normal(size=N)
    kappa -= kappa.mean()
    delta, x = 0.4, 0

    def chart(b, k, d):
        return np.concatenate([b[:-1], k[:-1], [d]])

    def unchart(z):
        head = z[: M - 1]
        b = np.append(head, math.sqrt(1 - head @ head))
        k = np.append(z[M - 1: M + N - 2], -z[M - 1: M + N - 2].sum())
        return b, k, z[-1]

    def move(z):
        b, k, d = unchart(z)
        y = b.copy()
        y[x] += d
        r = np.linalg.norm(y)
        return chart(y / r, k * r, -d / r)

    z0 = chart(b0, kappa, delta)
    z1 = move(z0)
    assert np.allclose(move(z1), z0)
    y = b0.copy()
    y[x] += delta
    r = np.linalg.norm(y)
    # surface element on the sphere in this chart is dz / |b_M|
    ratio = _numeric_det(move, z0) * abs(unchart(z0)[0][-1]) / abs(unchart(z1)[0][-1])
    assert ratio == pytest.approx(r ** (N - M - 2), rel=1e-6)


# -- overdispersion step against quadrature -----------------------------------


def _nu_oracle_mean(D, E, eta, s2):
    logf = lambda v: D * (eta + v) - E * math.exp(eta + v) - v * v / (2 * s2)
    sd = math.sqrt(s2)
    lo, hi = -12 * sd, 12 * sd
    ref = logf(0.0)
    f = lambda v: math.exp(logf(v) - ref)
    z = integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-12, limit=400)[0]
    return integrate.quad(lambda v: v * f(v), lo, hi, epsabs=0, epsrel=1e-12, limit=400)[0] / z


def _run_nu(s2, cells_m, N, sweeps, seed):
    ds = _dataset(np.full((1, cells_m, N), 5), 100.0)
    s = zero_state(1, cells_m, N, alpha=np.full((1, cells_m), -3.0), sigma2_nu=np.array([s2]))
    # a huge inverse-gamma prior pins sigma2_nu at s2
    hyper = Hyperparams(a_mu=1e9, b_mu=1e9 * s2)
    post_sd = math.sqrt(s2 / (1 + s2 * 100 * math.exp(-3)))
    tuner = MhTuner({"nu": np.full((1, cells_m, N), 2.4 * post_sd)}, enabled=False)
    sw = GibbsSweep(ds, hyper, SamplerConfig(total=1, burn_in=0), np.random.default_rng(seed), tuner)
    means = np.empty(sweeps)
    for j in range(sweeps):
        sw.update_overdispersion(s)
        means[j] = s.nu.mean()
    return means[sweeps // 10:], s


def test_nu_single_cell_quadrature_tight():
    # 2000 exchangeable cells x 1000 kept sweeps = 2e6 draws of the same single-cell conditional
    s2 = 2.5e-4
    means, s = _run_nu(s2, 200, 10, 1100, seed=10)
    oracle = _nu_oracle_mean(5, 100.0, -3.0, s2)
    batch = means[: means.size // 50 * 50].reshape(50, -1).mean(axis=1)
    mcse = batch.std(ddof=1) / math.sqrt(50)
    assert mcse < 3e-5
    assert abs(means.mean() - oracle) < 1e-4
    assert s.sigma2_nu[0] == pytest.approx(s2, rel=1e-3)


def test_nu_single_cell_quadrature_wide_prior():
    s2 = 0.5
    means, _ = _run_nu(s2, 100, 10, 1100, seed=11)
    oracle = _nu_oracle_mean(5, 100.0, -3.0, s2)
    batch = means[: means.size // 50 * 50].reshape(50, -1).mean(axis=1)
    mcse = batch.std(ddof=1) / math.sqrt(50)
    assert abs(means.mean() - oracle) < 4 * mcse
    assert abs(oracle) > 0.01  # the prior pull is visible at this variance


# -- recovery and tuning on synthetic data ------------------------------------


@pytest.fixture(scope="module")
def recovery_run():
    rng = np.random.default_rng(12)
    truth = example_truth(10, 20, 2, rng, phi_pop=[(0.0, 0.0), (0.5, -0.05)])
    ds, tr = simulate_dataset(SynthSpec(M=10, N=20, n=2, truth=truth, seed=13, exposure=2000.0))
    out = run_chain(ds, Hyperparams(), SamplerConfig(total=5000, burn_in=2500, thin=5, seed=14))
    return ds, tr, out


def test_alpha_recovery(recovery_run):
    _, tr, out = recovery_run
    a = out.draws["alpha"]
    med, sd = np.median(a, axis=0), a.std(axis=0)
    inside = np.abs(med - tr.alpha) <= 3 * sd
    assert inside.mean() >= 0.9, inside.mean()


def test_acceptance_rates_after_tuning(recovery_run):
    _, _, out = recovery_run
    for fam in FAMILIES:
        acc, att = out.acceptance[fam]
        assert att > 0
        assert 0.15 <= acc / att <= 0.45, (fam, acc / att)
