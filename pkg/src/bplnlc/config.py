"""Run configuration: a sectioned key-value file plus command-line overrides."""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .data import ConfigurationError
from .model import Hyperparams
from .sampler import SamplerConfig

OUTPUT_ENV = "BPLNLC_OUTPUT_DIR"
DEFAULT_OUTPUT = "bplnlc-out"
_SEQUENCE_KEYS = {"phi0": (2,), "sigma0": (2, 2), "slab_scale": (2,)}


def reference_text() -> str:
    return resources.files("bplnlc").joinpath("reference.ini").read_text()


def parse_range(text: str) -> tuple[int, int]:
    """``"0-99"`` -> (0, 99); a single integer gives a one-point range."""
    parts = [p.strip() for p in str(text).split("-")]
    try:
        if len(parts) == 1:
            lo = hi = int(parts[0])
        elif len(parts) == 2:
            lo, hi = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise ConfigurationError(f"cannot parse range {text!r}; expected e.g. 0-99") from None
    if hi < lo:
        raise ConfigurationError(f"range {text!r} is empty")
    return lo, hi


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).replace(",", " ").split()]


def _hyper_value(key: str, text: str):
    vals = _floats(text)
    if key in _SEQUENCE_KEYS:
        shape = _SEQUENCE_KEYS[key]
        if key == "slab_scale" and len(vals) == 1:
            vals = vals * 2
        if len(vals) != (4 if shape == (2, 2) else 2):
            raise ConfigurationError(f"hyper.{key} needs {4 if shape == (2, 2) else 2} numbers")
        return ((vals[0], vals[1]), (vals[2], vals[3])) if shape == (2, 2) else tuple(vals)
    return vals[0] if len(vals) == 1 else tuple(vals)


@dataclass
class RunConfig:
    """Everything a subcommand needs, resolved from file and flags."""

    deaths: str | None = None
    exposures: str | None = None
    populations: list[str] = field(default_factory=lambda: ["Female", "Male"])
    dataset_csv: str | None = None
    ages: tuple[int, int] = (0, 99)
    years: tuple[int, int] = (1951, 2000)
    variant: str = "full"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    chains: int = 1
    horizon: int = 20
    level: float = 0.95
    overdispersion_mode: str = "resample"
    output_dir: str | None = None
    # False when the window comes from the reference file; a dataset CSV then keeps its own extent
    window_explicit: bool = True
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        if self.horizon < 0:
            raise ConfigurationError("horizon must be >= 0")
        if not 0.0 < self.level < 1.0:
            raise ConfigurationError("level must lie in (0, 1)")
        if self.chains < 1:
            raise ConfigurationError("chains must be >= 1")
        if self.variant not in ("full", "model2"):
            raise ConfigurationError("variant must be full or model2")

    def resolve(self, path: str | None) -> Path | None:
        if not path:
            return None
        p = Path(path).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)

    def validate_inputs(self) -> None:
        """Check that the data files exist."""
        if self.dataset_csv:
            paths = [self.resolve(self.dataset_csv)]
        else:
            if not self.deaths or not self.exposures:
                raise ConfigurationError("give data.dataset_csv or both data.deaths and data.exposures")
            paths = [self.resolve(self.deaths), self.resolve(self.exposures)]
        for p in paths:
            if not p.is_file():
                raise ConfigurationError(f"input file not found: {p}")

    def load_dataset(self):
        from .data import load_hmd, read_dataset_csv

        self.validate_inputs()
        if self.dataset_csv:
            ds = read_dataset_csv(self.resolve(self.dataset_csv))
            if not self.window_explicit:
                return ds
            lo_a, hi_a = max(self.ages[0], ds.ages[0]), min(self.ages[1], ds.ages[-1])
            lo_y, hi_y = max(self.years[0], ds.years[0]), min(self.years[1], ds.years[-1])
            return ds.window((lo_a, hi_a), (lo_y, hi_y))
        return load_hmd(self.resolve(self.deaths), self.resolve(self.exposures), self.populations,
                        self.ages, self.years)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read the reference file, layer ``path`` over it, then apply ``overrides``.

    ``overrides`` maps ``"section.key"`` to a string value, as a flag would give it.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_string(reference_text())
    base_dir = Path.cwd()
    explicit = False
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        user = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        user.read(path)
        explicit = user.has_section("window") and bool(set(user["window"]))
        parser.read(path)
        base_dir = path.resolve().parent
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))
        explicit = explicit or section == "window"
    cfg = _from_parser(parser, base_dir)
    cfg.window_explicit = explicit
    return cfg


def _from_parser(cp: configparser.ConfigParser, base_dir: Path) -> RunConfig:
    try:
        variant = cp.get("model", "variant")
        s = cp["sampler"]
        sampler = SamplerConfig.for_variant(
            variant,
            total=s.getint("total"),
            burn_in=s.getint("burn_in"),
            thin=s.getint("thin"),
            seed=s.getint("seed"),
            scheme=s.get("scheme"),
            adapt=s.getboolean("adapt"),
            adapt_window=s.getint("adapt_window"),
        )
        known = set(Hyperparams.__dataclass_fields__)
        extra = set(cp["hyper"]) - known
        if extra:
            raise ConfigurationError(f"unknown hyperparameters: {sorted(extra)}")
        hyper = Hyperparams(**{k: _hyper_value(k, v) for k, v in cp["hyper"].items()})
        d = cp["data"]
        return RunConfig(
            deaths=d.get("deaths") or None,
            exposures=d.get("exposures") or None,
            populations=[p.strip() for p in d.get("populations", "").split(",") if p.strip()],
            dataset_csv=d.get("dataset_csv") or None,
            ages=parse_range(cp.get("window", "ages")),
            years=parse_range(cp.get("window", "years")),
            variant=variant,
            sampler=sampler,
            hyper=hyper,
            chains=s.getint("chains", 1),
            horizon=cp.getint("forecast", "horizon"),
            level=cp.getfloat("forecast", "level"),
            overdispersion_mode=cp.get("forecast", "overdispersion_mode"),
            output_dir=cp.get("output", "dir") or None,
            base_dir=base_dir,
        )
    except (ValueError, KeyError, configparser.Error) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"invalid configuration: {exc}") from exc
