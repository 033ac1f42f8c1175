"""Command-line entry point: ``bplnlc fit | forecast | simulate | diagnose``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from . import io as bio
from .config import RunConfig, load_config
from .data import MortalityDataset, read_dataset_csv, write_dataset_csv
from .diagnostics import GIR_MAX_M, GIR_MAX_N, GirConfig, diagnose_chain, getting_it_right
from .forecast import forecast
from .model import Hyperparams
from .sampler import ChainOutput, SamplerConfig, run_chain
from .synth import SynthSpec, example_truth, simulate

log = logging.getLogger("bplnlc")

EXIT_OK = 0
EXIT_ERROR = 2
DATASET_NAME = "dataset.csv"


class CliError(RuntimeError):
    """A user-facing failure; reported without a traceback."""


# -- shared helpers ----------------------------------------------------------


def _overrides(args, mapping: dict[str, str]) -> dict:
    out = {}
    for attr, dotted in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[dotted] = value
    return out


_FIT_FLAGS = {
    "deaths": "data.deaths",
    "exposures": "data.exposures",
    "populations": "data.populations",
    "dataset_csv": "data.dataset_csv",
    "ages": "window.ages",
    "years": "window.years",
    "variant": "model.variant",
    "iterations": "sampler.total",
    "burn_in": "sampler.burn_in",
    "thin": "sampler.thin",
    "seed": "sampler.seed",
    "scheme": "sampler.scheme",
    "chains": "sampler.chains",
    "output_dir": "output.dir",
}


def _state_to_json(state) -> dict:
    return {k: np.asarray(getattr(state, k)).tolist() for k in state.__dataclass_fields__}


def _prepare_out(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run_one_chain(args):
    dataset, hyper, sampler, chain = args
    return run_chain(dataset, hyper, sampler, chain=chain)


def run_chains(dataset: MortalityDataset, hyper: Hyperparams, sampler: SamplerConfig, chains: int = 1,
               threads: int = 1) -> list[ChainOutput]:
    """Independent chains with streams keyed by (seed, chain); each chain stays sequential."""
    jobs = [(dataset, hyper, sampler, c) for c in range(chains)]
    if threads > 1 and chains > 1:
        with ProcessPoolExecutor(max_workers=min(threads, chains)) as pool:
            return list(pool.map(_run_one_chain, jobs))
    return [_run_one_chain(j) for j in jobs]


def _merged_chain(chains: list[ChainOutput]) -> ChainOutput:
    if len(chains) == 1:
        return chains[0]
    first = chains[0]
    draws = {b: np.concatenate([c.draws[b] for c in chains]) for b in first.draws}
    acc = {f: tuple(sum(c.acceptance[f][k] for c in chains) for k in (0, 1)) for f in first.acceptance}
    acc_b = {f: tuple(sum(c.acceptance_burn_in[f][k] for c in chains) for k in (0, 1))
             for f in first.acceptance_burn_in}
    return ChainOutput(
        draws=draws, w_trace=np.concatenate([c.w_trace for c in chains]), acceptance=acc,
        acceptance_burn_in=acc_b, proposal_scales=first.proposal_scales,
        scale_change_trace=first.scale_change_trace, populations=first.populations, ages=first.ages,
        years=first.years, config=first.config, hyper=first.hyper, seed=first.seed,
        wall_seconds=sum(c.wall_seconds for c in chains), metadata={"chains": len(chains)},
    )


# -- fit ---------------------------------------------------------------------


def cmd_fit(args) -> int:
    cfg = load_config(args.config, _overrides(args, _FIT_FLAGS))
    sampler, hyper, chains = cfg.sampler, cfg.hyper, cfg.chains
    if args.from_manifest:
        manifest = bio.read_manifest(args.from_manifest)
        sampler, hyper = bio.config_from_manifest(manifest)
        chains = int(manifest.get("chains", 1))
    dataset = cfg.load_dataset()
    if args.from_manifest and manifest["dataset_hash"] != dataset.content_hash():
        raise CliError("the data differ from the data recorded in the manifest")
    out = _prepare_out(cfg.out_dir)
    log.info("fitting %s on %d populations x %d ages x %d years (%d sweeps, %d chain(s))",
             sampler.variant, dataset.n, dataset.M, dataset.N, sampler.total, chains)
    outputs = run_chains(dataset, hyper, sampler, chains, args.threads)
    manifest = bio.build_manifest(outputs[0], dataset.content_hash(), {"chains": chains})
    h = manifest["hash"]
    write_dataset_csv(dataset, out / DATASET_NAME, header_comment=f"manifest_hash={h}")
    bio.write_draws_csv(outputs, out / bio.DRAWS_NAME, h)
    bio.write_draws_cache(outputs, out / bio.CACHE_NAME, h)
    merged = _merged_chain(outputs)
    summary = bio.summary_table(merged.draws, merged.populations, merged.ages, merged.years, cfg.level)
    bio.write_table(summary, out / "summary.csv", h)
    report = diagnose_chain(merged)
    (out / "diagnostics.txt").write_text(f"# manifest_hash={h}\n" + report.to_text())
    bio.write_table(pd.DataFrame(report.to_rows()), out / "diagnostics.csv", h)
    bio.write_manifest(manifest, out)
    print(report.to_text(), end="")
    print(f"wrote fit outputs to {out} (manifest {h}, {merged.wall_seconds:.1f}s sampling)")
    return EXIT_OK


# -- forecast ----------------------------------------------------------------


def _load_run(run_dir: Path) -> tuple[dict, MortalityDataset, dict]:
    manifest = bio.read_manifest(run_dir)
    ds_path = run_dir / DATASET_NAME
    header = open(ds_path).readline().strip()
    if header != f"# manifest_hash={manifest['hash']}":
        raise bio.ManifestMismatchError(f"{ds_path} was not written by the run in {run_dir}")
    dataset = read_dataset_csv(ds_path)
    if dataset.content_hash() != manifest["dataset_hash"]:
        raise bio.ManifestMismatchError(f"{ds_path} content does not match the manifest")
    draws = bio.load_draws(run_dir, manifest)
    return manifest, dataset, draws


def _holdout_overlay(res, holdout: MortalityDataset, populations) -> pd.DataFrame:
    tab = res.summary("log_mu")
    tab = tab[tab["future"]]
    obs = []
    for pop, age, year in zip(tab["population"], tab["age"], tab["year"]):
        val = np.nan
        if pop in holdout.populations and age in holdout.ages and year in holdout.years:
            i = holdout.populations.index(pop)
            a, t = int(age - holdout.ages[0]), int(year - holdout.years[0])
            if holdout.observed[i, a, t] and holdout.deaths[i, a, t] > 0:
                val = float(np.log(holdout.deaths[i, a, t] / holdout.exposures[i, a, t]))
        obs.append(val)
    tab = tab.assign(observed_log_rate=obs)
    tab = tab[np.isfinite(tab["observed_log_rate"])].copy()
    tab["covered"] = ((tab["hpd_lo"] <= tab["observed_log_rate"]) & (tab["observed_log_rate"] <= tab["hpd_hi"]))
    tab["covered"] = tab["covered"].astype(int)
    return tab.drop(columns=["future"])


def cmd_forecast(args) -> int:
    run_dir = Path(args.run)
    manifest, dataset, draws = _load_run(run_dir)
    cfg = load_config(args.config) if args.config else RunConfig()
    horizon = cfg.horizon if args.horizon is None else args.horizon
    level = cfg.level if args.level is None else args.level
    mode = args.mode or cfg.overdispersion_mode
    seed = manifest["seed"] if args.seed is None else args.seed
    out = _prepare_out(Path(args.output_dir) if args.output_dir else run_dir)
    h = manifest["hash"]
    res = forecast(draws, dataset, horizon, level=level, seed=seed, mode=mode, threads=args.threads)
    bio.write_table(res.summary("kappa"), out / "forecast_kappa.csv", h)
    bio.write_table(res.summary("kappa_pop"), out / "forecast_kappa_pop.csv", h)
    log_mu = res.summary("log_mu")
    deaths = res.summary("deaths")
    bio.write_table(log_mu, out / "forecast_log_mu.csv", h)
    bio.write_table(deaths, out / "forecast_deaths.csv", h)

    observed = np.full(res.log_mu.shape[1:], np.nan)
    with np.errstate(divide="ignore"):
        rate = np.log(dataset.observed_rate)
    observed[:, :, : dataset.N] = np.where(np.isfinite(rate), rate, np.nan)
    obs_deaths = np.full(res.log_mu.shape[1:], np.nan)
    obs_deaths[:, :, : dataset.N] = np.where(dataset.observed, dataset.deaths, np.nan)
    series = log_mu.rename(columns={"median": "log_mu_median", "hpd_lo": "log_mu_lo", "hpd_hi": "log_mu_hi"})
    series["deaths_median"] = deaths["median"].to_numpy()
    series["deaths_lo"] = deaths["hpd_lo"].to_numpy()
    series["deaths_hi"] = deaths["hpd_hi"].to_numpy()
    series["observed_log_rate"] = observed.ravel()
    series["observed_deaths"] = obs_deaths.ravel()
    ages = dataset.ages if args.series_ages is None else [int(a) for a in args.series_ages.split(",")]
    for age in ages:
        bio.write_table(series[series["age"] == age], out / f"forecast_age_{age}.csv", h)

    if args.holdout:
        holdout = read_dataset_csv(args.holdout)
        overlay = _holdout_overlay(res, holdout, dataset.populations)
        bio.write_table(overlay, out / "forecast_holdout.csv", h)
        if len(overlay):
            print(f"holdout coverage of {level:g} intervals: {overlay['covered'].mean():.3f} over {len(overlay)} cells")
            for age in (15, 55, 70):
                sub = overlay[overlay["age"] == age]
                if len(sub):
                    print(f"  age {age}: {sub['covered'].mean():.3f} ({len(sub)} cells)")
        else:
            print("holdout file shares no cells with the forecast horizon")
    print(f"wrote forecast over {int(res.years[0])}-{int(res.years[-1])} to {out}")
    return EXIT_OK


# -- simulate ----------------------------------------------------------------


def _parse_pairs(text: str | None, n: int) -> list[tuple[float, float]] | None:
    if not text:
        return None
    pairs = [tuple(float(v) for v in chunk.split(",")) for chunk in text.split(";") if chunk.strip()]
    if len(pairs) != n or any(len(p) != 2 for p in pairs):
        raise CliError(f"--phi-pop needs {n} pairs like '0,0;2,-0.5'")
    return pairs


def cmd_simulate(args) -> int:
    M, N, n = args.dims
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 1]))
    truth = None
    if not args.prior_draw:
        truth = example_truth(M, N, n, rng, phi_pop=_parse_pairs(args.phi_pop, n), first_year=args.first_year)
    spec = SynthSpec(M=M, N=N, n=n, truth=truth, prior_draw=args.prior_draw, exposure=args.exposure,
                     seed=args.seed, first_year=args.first_year, first_age=args.first_age)
    dataset, state, meta = simulate(spec)
    bad = state.constraint_violations()
    if bad:
        raise CliError("simulated truth violates constraints: " + "; ".join(bad))
    record = {
        "dims": [M, N, n], "seed": args.seed, "prior_draw": bool(args.prior_draw), "exposure": args.exposure,
        "first_year": args.first_year, "first_age": args.first_age, "phi_pop": args.phi_pop or "",
        "dataset_hash": dataset.content_hash(),
    }
    record["hash"] = bio.manifest_hash(record)
    out = _prepare_out(Path(args.output_dir) if args.output_dir else RunConfig().out_dir)
    write_dataset_csv(dataset, out / DATASET_NAME, header_comment=f"manifest_hash={record['hash']}")
    truth_doc = {"manifest_hash": record["hash"], "state": _state_to_json(state),
                 "metadata": bio._jsonable(meta)}
    (out / "truth.json").write_text(json.dumps(truth_doc, indent=1, sort_keys=True) + "\n")
    bio.write_manifest(record, out)
    print(f"wrote simulated dataset ({n} x {M} x {N}) and truth to {out}")
    return EXIT_OK


# -- diagnose ----------------------------------------------------------------


def cmd_diagnose(args) -> int:
    M, N, n = args.dims
    if M > GIR_MAX_M or N > GIR_MAX_N:
        raise CliError(
            f"getting-it-right is only practical for small problems (M <= {GIR_MAX_M}, N <= {GIR_MAX_N}); "
            f"got M={M}, N={N}. Try --dims 3,5,2."
        )
    cfg = GirConfig(M=M, N=N, n=n, sweeps=args.sweeps, seed=args.seed, scheme=args.scheme,
                    alpha_shape_shift=1.0 if args.mutate else None)
    report = getting_it_right(cfg, self_compare=args.self_compare)
    out = _prepare_out(Path(args.output_dir) if args.output_dir else RunConfig().out_dir)
    record = {"dims": [M, N, n], "sweeps": args.sweeps, "seed": args.seed, "scheme": args.scheme,
              "mutate": bool(args.mutate), "self_compare": bool(args.self_compare)}
    h = bio.manifest_hash(record)
    bio.write_table(pd.DataFrame(report.rows()), out / "gir.csv", h)
    text = report.to_text()
    passed = report.fraction_below(4.0) >= 0.95
    verdict = f"verdict: {'PASS' if passed else 'FAIL'} ({report.fraction_below(4.0):.3f} of |z| < 4)"
    (out / "gir.txt").write_text(f"# manifest_hash={h}\n{text}\n{verdict}\n")
    print(text)
    print(verdict)
    return EXIT_OK if passed or not args.strict else 1


# -- parser ------------------------------------------------------------------


def _dims(text: str) -> tuple[int, int, int]:
    try:
        M, N, n = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("dims are M,N,n e.g. 3,5,2") from None
    return M, N, n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bplnlc", description="Multi-population Poisson log-normal Lee-Carter sampler")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="run the sampler and write draws, summary and diagnostics")
    f.add_argument("--config", help="INI file layered over the reference configuration")
    f.add_argument("--deaths", help="HMD Deaths_1x1 file")
    f.add_argument("--exposures", help="HMD Exposures_1x1 file")
    f.add_argument("--populations", help="comma-separated columns, e.g. Female,Male")
    f.add_argument("--dataset-csv", help="canonical dataset CSV instead of HMD files")
    f.add_argument("--ages", help="inclusive age window, e.g. 0-99")
    f.add_argument("--years", help="inclusive year window, e.g. 1951-2000")
    f.add_argument("--variant", choices=("full", "model2"))
    f.add_argument("--iterations", type=int)
    f.add_argument("--burn-in", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--scheme", choices=("exact", "published"))
    f.add_argument("--chains", type=int)
    f.add_argument("--threads", type=int, default=1, help="worker processes for multiple chains")
    f.add_argument("--from-manifest", help="reuse the sampler settings and seed of an earlier run")
    f.add_argument("--output-dir")
    f.set_defaults(func=cmd_fit)

    fc = sub.add_parser("forecast", help="posterior predictive tables from a fit directory")
    fc.add_argument("--run", required=True, help="output directory of a previous fit")
    fc.add_argument("--config")
    fc.add_argument("--horizon", type=int)
    fc.add_argument("--level", type=float)
    fc.add_argument("--mode", choices=("resample", "zero"), help="overdispersion in future cells")
    fc.add_argument("--seed", type=int)
    fc.add_argument("--threads", type=int, default=1)
    fc.add_argument("--holdout", help="canonical CSV of held-out years for a coverage overlay")
    fc.add_argument("--series-ages", help="comma-separated ages for per-age files (default all)")
    fc.add_argument("--output-dir")
    fc.set_defaults(func=cmd_forecast)

    s = sub.add_parser("simulate", help="write a synthetic dataset and its true parameters")
    s.add_argument("--dims", type=_dims, default=(10, 20, 2), help="M,N,n")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prior-draw", action="store_true", help="draw the truth from the priors")
    s.add_argument("--phi-pop", help="population drifts, e.g. '0,0;2,-0.5'")
    s.add_argument("--exposure", type=float, default=1000.0)
    s.add_argument("--first-year", type=int, default=1)
    s.add_argument("--first-age", type=int, default=0)
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diagnose", help="getting-it-right joint-distribution check")
    d.add_argument("--dims", type=_dims, default=(3, 5, 2), help="M,N,n")
    d.add_argument("--sweeps", type=int, default=20000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--scheme", choices=("exact", "published"), default="exact")
    d.add_argument("--mutate", action="store_true", help="test hook: corrupt the e_x update shape by +1")
    d.add_argument("--self-compare", action="store_true", help="compare the prior simulator with itself")
    d.add_argument("--strict", action="store_true", help="exit 1 when the check fails")
    d.add_argument("--output-dir")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
