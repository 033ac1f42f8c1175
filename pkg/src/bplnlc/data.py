"""Human Mortality Database 1x1 ingest and the multi-population dataset container.

HMD period tables look like::

    Japan, Deaths (period 1x1)  Last modified: 22 Oct 2018; Methods Protocol: v6 (2017)

      Year          Age             Female            Male           Total
      1947           0             105161.00      125684.00      230845.00
      1947         110+                 0.00           1.00           1.00

Only that layout is supported.
"""
from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, TextIO

import numpy as np
import pandas as pd

CANONICAL_COLUMNS = ("population", "age", "year", "deaths", "exposure", "missing")


class HmdParseError(ValueError):
    """A data line of an HMD table could not be parsed."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class ConfigurationError(ValueError):
    pass


class AssemblyError(ValueError):
    """Requested cells are missing from the source tables."""

    def __init__(self, missing: list[tuple[str, int, int]]):
        shown = ", ".join(f"({p}, age {a}, year {y})" for p, a, y in missing[:20])
        more = f" and {len(missing) - 20} more" if len(missing) > 20 else ""
        super().__init__(f"{len(missing)} cells absent from source tables: {shown}{more}")
        self.missing = missing


def _parse_age(token: str) -> int:
    return int(token[:-1]) if token.endswith("+") else int(token)


def parse_hmd_table(stream: TextIO | str, value_column: str) -> pd.DataFrame:
    """Parse an HMD 1x1 deaths or exposures table.

    Parameters
    ----------
    stream : text stream or str
        File contents in the HMD 1x1 layout.
    value_column : str
        Which value column to keep, one of the header labels after ``Age``
        (``Female``, ``Male`` or ``Total`` in standard files).

    Returns
    -------
    pandas.DataFrame
        Columns ``year``, ``age`` (int) and ``value`` (float, NaN where the
        source has ``.``).
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)

    header: list[str] | None = None
    value_idx = -1
    years: list[int] = []
    ages: list[int] = []
    values: list[float] = []
    for lineno, raw in enumerate(stream, start=1):
        tokens = raw.split()
        if not tokens:
            continue
        if header is None:
            if tokens[0] == "Year" and len(tokens) >= 3 and tokens[1] == "Age":
                header = tokens
                if value_column not in header[2:]:
                    raise ConfigurationError(
                        f"unknown value column {value_column!r}; available: {header[2:]}"
                    )
                value_idx = header.index(value_column)
            continue
        if len(tokens) != len(header):
            raise HmdParseError(
                f"expected {len(header)} columns, found {len(tokens)}", lineno
            )
        try:
            year = int(tokens[0])
        except ValueError:
            raise HmdParseError(f"non-numeric year {tokens[0]!r}", lineno) from None
        try:
            age = _parse_age(tokens[1])
        except ValueError:
            raise HmdParseError(f"non-numeric age {tokens[1]!r}", lineno) from None
        token = tokens[value_idx]
        if token == ".":
            value = math.nan
        else:
            try:
                value = float(token)
            except ValueError:
                raise HmdParseError(f"non-numeric value {token!r}", lineno) from None
        years.append(year)
        ages.append(age)
        values.append(value)

    if header is None:
        if value_column not in ("Female", "Male", "Total"):
            raise ConfigurationError(f"unknown value column {value_column!r}")
        raise HmdParseError("no 'Year Age ...' header line found", 0)
    return pd.DataFrame(
        {
            "year": np.asarray(years, dtype=np.int64),
            "age": np.asarray(ages, dtype=np.int64),
            "value": np.asarray(values, dtype=float),
        }
    )


def read_hmd_file(path: str | Path, value_column: str) -> pd.DataFrame:
    with open(path, encoding="utf-8", errors="replace") as fh:
        return parse_hmd_table(fh, value_column)


@dataclass(frozen=True, eq=False)
class MortalityDataset:
    """Deaths and exposures on a population x age x year grid.

    Arrays are indexed ``[population, age, year]``. Masked cells keep whatever
    was read from the source (0 when absent) and are ignored by every
    likelihood sum.
    """

    ages: np.ndarray
    years: np.ndarray
    populations: tuple[str, ...]
    deaths: np.ndarray
    exposures: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        ages = np.asarray(self.ages, dtype=np.int64)
        years = np.asarray(self.years, dtype=np.int64)
        object.__setattr__(self, "ages", ages)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "populations", tuple(str(p) for p in self.populations))
        deaths = np.asarray(self.deaths, dtype=np.int64)
        exposures = np.asarray(self.exposures, dtype=float)
        missing = np.asarray(self.missing, dtype=bool)
        object.__setattr__(self, "deaths", deaths)
        object.__setattr__(self, "exposures", exposures)
        object.__setattr__(self, "missing", missing)

        shape = (len(self.populations), len(ages), len(years))
        for name, arr in (("deaths", deaths), ("exposures", exposures), ("missing", missing)):
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if min(shape) < 1:
            raise ValueError("dataset needs at least one population, age and year")
        for name, seq in (("ages", ages), ("years", years)):
            if len(seq) > 1 and np.any(np.diff(seq) != 1):
                raise ValueError(f"{name} must be consecutive integers")
        if len(set(self.populations)) != len(self.populations):
            raise ValueError("population labels must be unique")
        observed = ~missing
        if np.any(deaths[observed] < 0):
            raise ValueError("deaths must be non-negative")
        if np.any(~(exposures[observed] > 0)):
            raise ValueError("exposures must be positive on non-missing cells")
        for arr in (deaths, exposures, missing):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.populations)

    @property
    def M(self) -> int:
        return len(self.ages)

    @property
    def N(self) -> int:
        return len(self.years)

    @cached_property
    def observed(self) -> np.ndarray:
        return ~self.missing

    @cached_property
    def deaths_f(self) -> np.ndarray:
        """Deaths as float with masked cells zeroed."""
        return np.where(self.observed, self.deaths, 0).astype(float)

    @cached_property
    def exposures_f(self) -> np.ndarray:
        """Exposures with masked cells zeroed."""
        return np.where(self.observed, self.exposures, 0.0)

    @cached_property
    def log_exposures(self) -> np.ndarray:
        out = np.zeros(self.exposures.shape)
        np.log(self.exposures, out=out, where=self.observed)
        return out

    @cached_property
    def log_factorial(self) -> np.ndarray:
        from scipy.special import gammaln

        return np.where(self.observed, gammaln(self.deaths_f + 1.0), 0.0)

    @property
    def observed_rate(self) -> np.ndarray:
        """Observed central death rate D/E, NaN on masked cells."""
        rate = np.full(self.exposures.shape, np.nan)
        np.divide(self.deaths, self.exposures, out=rate, where=self.observed)
        return rate

    def window(self, age_range: tuple[int, int], year_range: tuple[int, int]) -> "MortalityDataset":
        """Restrict to inclusive age and year ranges."""
        ai = (self.ages >= age_range[0]) & (self.ages <= age_range[1])
        yi = (self.years >= year_range[0]) & (self.years <= year_range[1])
        if not ai.any() or not yi.any():
            raise ValueError("window selects no cells")
        return MortalityDataset(
            ages=self.ages[ai],
            years=self.years[yi],
            populations=self.populations,
            deaths=self.deaths[:, ai][:, :, yi],
            exposures=self.exposures[:, ai][:, :, yi],
            missing=self.missing[:, ai][:, :, yi],
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(",".join(self.populations).encode())
        for arr in (self.ages, self.years, self.deaths, self.exposures, self.missing):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(values, dtype=float) + 0.5)


def assemble_dataset(
    deaths_tables: Mapping[str, pd.DataFrame],
    exposure_tables: Mapping[str, pd.DataFrame],
    age_range: tuple[int, int],
    year_range: tuple[int, int],
) -> MortalityDataset:
    """Build a dense dataset over the inclusive age and year window.

    Deaths are rounded half-up to integers. Cells with a missing value or
    non-positive exposure are flagged in ``missing``; cells absent from a
    source table raise :class:`AssemblyError`.
    """
    if set(deaths_tables) != set(exposure_tables):
        raise ConfigurationError("deaths and exposures must cover the same populations")
    populations = tuple(deaths_tables)
    ages = np.arange(age_range[0], age_range[1] + 1)
    years = np.arange(year_range[0], year_range[1] + 1)
    if len(ages) == 0 or len(years) == 0:
        raise ConfigurationError("empty age or year range")
    shape = (len(populations), len(ages), len(years))
    deaths = np.zeros(shape)
    exposures = np.zeros(shape)
    missing = np.zeros(shape, dtype=bool)
    absent: list[tuple[str, int, int]] = []

    for i, pop in enumerate(populations):
        for target, table in ((deaths, deaths_tables[pop]), (exposures, exposure_tables[pop])):
            grid = _to_grid(table, ages, years)
            gaps = np.isnan(grid["present"])
            if gaps.any():
                for a, y in zip(*np.nonzero(gaps)):
                    absent.append((pop, int(ages[a]), int(years[y])))
            values = grid["value"]
            missing[i] |= np.isnan(values)
            target[i] = np.nan_to_num(values, nan=0.0)
    if absent:
        absent = sorted(set(absent), key=lambda c: (populations.index(c[0]), c[1], c[2]))
        raise AssemblyError(absent)

    missing |= exposures <= 0
    deaths = round_half_up(deaths)
    missing |= deaths < 0
    deaths[missing & (deaths < 0)] = 0
    return MortalityDataset(
        ages=ages,
        years=years,
        populations=populations,
        deaths=deaths.astype(np.int64),
        exposures=exposures,
        missing=missing,
    )


def _to_grid(table: pd.DataFrame, ages: np.ndarray, years: np.ndarray) -> dict[str, np.ndarray]:
    sub = table[table["age"].between(ages[0], ages[-1]) & table["year"].between(years[0], years[-1])]
    sub = sub.drop_duplicates(subset=["age", "year"], keep="last")
    present = np.full((len(ages), len(years)), np.nan)
    value = np.full((len(ages), len(years)), np.nan)
    ai = sub["age"].to_numpy() - ages[0]
    yi = sub["year"].to_numpy() - years[0]
    present[ai, yi] = 1.0
    value[ai, yi] = sub["value"].to_numpy(dtype=float)
    return {"present": present, "value": value}


def load_hmd(
    deaths_path: str | Path,
    exposures_path: str | Path,
    populations: Iterable[str],
    age_range: tuple[int, int],
    year_range: tuple[int, int],
) -> MortalityDataset:
    """Read HMD ``Deaths_1x1`` and ``Exposures_1x1`` files for the given sex columns."""
    populations = list(populations)
    deaths = {p: read_hmd_file(deaths_path, p) for p in populations}
    exposures = {p: read_hmd_file(exposures_path, p) for p in populations}
    return assemble_dataset(deaths, exposures, age_range, year_range)


def write_dataset_csv(dataset: MortalityDataset, path: str | Path, header_comment: str | None = None) -> None:
    """Write the canonical one-row-per-cell CSV (UTF-8, LF)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CANONICAL_COLUMNS)
        for i, pop in enumerate(dataset.populations):
            for a, age in enumerate(dataset.ages):
                for y, year in enumerate(dataset.years):
                    writer.writerow(
                        (
                            pop,
                            int(age),
                            int(year),
                            int(dataset.deaths[i, a, y]),
                            repr(float(dataset.exposures[i, a, y])),
                            int(dataset.missing[i, a, y]),
                        )
                    )


def read_dataset_csv(path: str | Path) -> MortalityDataset:
    frame = pd.read_csv(path, comment="#", dtype={"population": str}, float_precision="round_trip")
    missing_cols = set(CANONICAL_COLUMNS) - set(frame.columns)
    if missing_cols:
        raise ConfigurationError(f"canonical CSV lacks columns {sorted(missing_cols)}")
    populations = tuple(dict.fromkeys(frame["population"]))
    ages = np.arange(frame["age"].min(), frame["age"].max() + 1)
    years = np.arange(frame["year"].min(), frame["year"].max() + 1)
    shape = (len(populations), len(ages), len(years))
    expected = int(np.prod(shape))
    if len(frame) != expected:
        raise AssemblyError(_absent_cells(frame, populations, ages, years))
    pi = frame["population"].map({p: k for k, p in enumerate(populations)}).to_numpy()
    ai = frame["age"].to_numpy() - ages[0]
    yi = frame["year"].to_numpy() - years[0]
    deaths = np.zeros(shape, dtype=np.int64)
    exposures = np.zeros(shape)
    missing = np.zeros(shape, dtype=bool)
    deaths[pi, ai, yi] = frame["deaths"].to_numpy(dtype=np.int64)
    exposures[pi, ai, yi] = frame["exposure"].to_numpy(dtype=float)
    missing[pi, ai, yi] = frame["missing"].to_numpy(dtype=np.int64) != 0
    return MortalityDataset(ages, years, populations, deaths, exposures, missing)


def _absent_cells(frame, populations, ages, years):
    seen = set(zip(frame["population"], frame["age"], frame["year"]))
    return [
        (p, int(a), int(y))
        for p in populations
        for a in ages
        for y in years
        if (p, a, y) not in seen
    ]
