from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bplnlc.data import (
    AssemblyError,
    ConfigurationError,
    HmdParseError,
    MortalityDataset,
    assemble_dataset,
    load_hmd,
    parse_hmd_table,
    read_dataset_csv,
    round_half_up,
    write_dataset_csv,
)

HEADER = "Japan, Deaths (period 1x1)  Last modified: 01 Jan 2020\n\n  Year  Age  Female  Male  Total\n"


def test_parse_plain_line():
    df = parse_hmd_table(HEADER + "1951   0   9136.44   11937.53   21073.97\n", "Female")
    assert df.iloc[0].tolist() == [1951, 0, 9136.44]


def test_parse_open_age():
    df = parse_hmd_table(HEADER + "1951   110+   0.00   1.00   1.00\n", "Male")
    assert (int(df.year[0]), int(df.age[0]), float(df.value[0])) == (1951, 110, 1.0)


def test_parse_missing_value():
    df = parse_hmd_table(HEADER + "1951   3   .   .   .\n", "Total")
    assert int(df.age[0]) == 3 and np.isnan(df.value[0])


def test_parse_bad_column_count_reports_line():
    with pytest.raises(HmdParseError) as err:
        parse_hmd_table(HEADER + "1951 0 1.0 2.0 3.0\n1952 0 1.0\n", "Female")
    assert err.value.line_number == 5


def test_parse_non_numeric_year():
    with pytest.raises(HmdParseError):
        parse_hmd_table(HEADER + "19x1 0 1.0 2.0 3.0\n", "Female")


def test_parse_unknown_column():
    with pytest.raises(ConfigurationError):
        parse_hmd_table(HEADER + "1951 0 1.0 2.0 3.0\n", "Both")


def _table(rows):
    return pd.DataFrame(rows, columns=["year", "age", "value"])


def test_minimal_grid():
    ds = assemble_dataset({"P": _table([(2000, 40, 5.0)])}, {"P": _table([(2000, 40, 100.0)])}, (40, 40), (2000, 2000))
    assert (ds.n, ds.M, ds.N) == (1, 1, 1)
    assert ds.deaths[0, 0, 0] == 5 and ds.exposures[0, 0, 0] == 100.0


def test_fractional_deaths_rounded():
    ds = assemble_dataset({"P": _table([(2000, 0, 12.6)])}, {"P": _table([(2000, 0, 50.0)])}, (0, 0), (2000, 2000))
    assert ds.deaths[0, 0, 0] == 13
    assert list(round_half_up(np.array([0.5, 1.5, 2.49]))) == [1.0, 2.0, 2.0]


def test_absent_cells_listed():
    d = {"P": _table([(2000, 0, 1.0)])}
    e = {"P": _table([(2000, 0, 10.0)])}
    with pytest.raises(AssemblyError) as err:
        assemble_dataset(d, e, (0, 1), (2000, 2000))
    assert ("P", 1, 2000) in err.value.missing


def test_missing_and_zero_exposure_masked():
    d = {"P": _table([(2000, 0, 1.0), (2000, 1, float("nan"))])}
    e = {"P": _table([(2000, 0, 0.0), (2000, 1, 10.0)])}
    ds = assemble_dataset(d, e, (0, 1), (2000, 2000))
    assert ds.missing[0, :, 0].tolist() == [True, True]


def _hmd_text(kind, years, ages, rng):
    lines = [f"Country, {kind} (period 1x1)", "", "  Year  Age  Female  Male  Total"]
    for y in years:
        for a in ages:
            f, m = rng.uniform(1, 1000, 2) if kind == "Exposures" else rng.integers(0, 50, 2)
            lines.append(f"{y} {a} {f:.2f} {m:.2f} {f + m:.2f}")
        lines.append(f"{y} 110+ 0.00 1.00 1.00")
    return "\n".join(lines) + "\n"


def test_load_hmd_window(tmp_path):
    rng = np.random.default_rng(0)
    years, ages = range(1950, 1956), range(0, 8)
    (tmp_path / "D.txt").write_text(_hmd_text("Deaths", years, ages, rng))
    (tmp_path / "E.txt").write_text(_hmd_text("Exposures", years, ages, rng))
    ds = load_hmd(tmp_path / "D.txt", tmp_path / "E.txt", ["Female", "Male"], (0, 5), (1951, 1955))
    assert (ds.n, ds.M, ds.N) == (2, 6, 5)
    assert ds.populations == ("Female", "Male")
    assert np.all(np.isfinite(ds.observed_rate[ds.observed]))


def test_dataset_validation():
    with pytest.raises(ValueError):
        MortalityDataset([0, 2], [1], ["A"], np.ones((1, 2, 1)), np.ones((1, 2, 1)), np.zeros((1, 2, 1), bool))
    with pytest.raises(ValueError):
        MortalityDataset([0], [1], ["A"], -np.ones((1, 1, 1)), np.ones((1, 1, 1)), np.zeros((1, 1, 1), bool))


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 3), M=st.integers(1, 4), N=st.integers(1, 4), seed=st.integers(0, 2**31 - 1)
)
def test_csv_round_trip(tmp_path_factory, n, M, N, seed):
    rng = np.random.default_rng(seed)
    shape = (n, M, N)
    missing = rng.random(shape) < 0.2
    exposures = np.where(missing, 0.0, rng.uniform(0.1, 1e5, shape))
    ds = MortalityDataset(
        np.arange(M) + 20, np.arange(N) + 1990, [f"pop {k}" for k in range(n)],
        rng.integers(0, 1000, shape), exposures, missing,
    )
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_dataset_csv(ds, path, header_comment="x")
    back = read_dataset_csv(path)
    assert back.populations == ds.populations
    for name in ("deaths", "exposures", "missing"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))
    assert back.content_hash() == ds.content_hash()
    assert path.read_bytes().count(b"\r") == 0


def test_window():
    rng = np.random.default_rng(1)
    ds = MortalityDataset(np.arange(5), np.arange(2000, 2006), ["A"], rng.integers(0, 9, (1, 5, 6)),
                          np.full((1, 5, 6), 10.0), np.zeros((1, 5, 6), bool))
    w = ds.window((1, 3), (2002, 2003))
    assert w.ages.tolist() == [1, 2, 3] and w.years.tolist() == [2002, 2003]
    assert np.array_equal(w.deaths, ds.deaths[:, 1:4, 2:4])
