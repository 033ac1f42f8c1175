"""Bayesian Poisson log-normal Lee-Carter model for several populations.

Spike-and-slab selection of population drift terms, Metropolis-within-Gibbs
estimation and posterior predictive forecasting.
"""
from __future__ import annotations

from .data import MortalityDataset, assemble_dataset, load_hmd, parse_hmd_table, read_dataset_csv, write_dataset_csv
from .model import DriftDesign, Hyperparams, ModelState, ar1_logdensity, build_precision, linear_predictor, poisson_loglik
from .sampler import ChainOutput, SamplerConfig, initialize_state, run_chain
from .diagnostics import GirConfig, getting_it_right, inclusion_proportions, reduce_model
from .forecast import ForecastResult, forecast, hpd_interval
from .synth import SynthSpec, example_truth, sample_prior, simulate, simulate_dataset

__version__ = "0.1.0"

__all__ = [
    "ChainOutput",
    "DriftDesign",
    "ForecastResult",
    "GirConfig",
    "Hyperparams",
    "ModelState",
    "MortalityDataset",
    "SamplerConfig",
    "SynthSpec",
    "ar1_logdensity",
    "assemble_dataset",
    "build_precision",
    "example_truth",
    "forecast",
    "getting_it_right",
    "hpd_interval",
    "inclusion_proportions",
    "initialize_state",
    "linear_predictor",
    "load_hmd",
    "parse_hmd_table",
    "poisson_loglik",
    "read_dataset_csv",
    "reduce_model",
    "run_chain",
    "sample_prior",
    "simulate",
    "simulate_dataset",
    "write_dataset_csv",
]
