"""Persistence of chains: columnar draws CSV, binary cache, summaries and manifests.

Every scalar parameter gets one CSV column named ``block[label,...]``, e.g.
``alpha[Female,0]``, ``kappa[1951]`` or ``phi_pop[Male,2]``. Files written
for a run begin with a ``# manifest_hash=<hex>`` comment line so downstream
commands can refuse to mix outputs from different fits.
"""
from __future__ import annotations

import hashlib
import io as _io
import json
import logging
import platform
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import pandas as pd

from . import __version__
from .model import Hyperparams
from .sampler import STORED_BLOCKS, ChainOutput, SamplerConfig

log = logging.getLogger("bplnlc")

HASH_PREFIX = "# manifest_hash="
MANIFEST_NAME = "manifest.json"
DRAWS_NAME = "draws.csv"
CACHE_NAME = "draws.npz"


class ManifestMismatchError(RuntimeError):
    """An output file was produced by a different run than the manifest describes."""


class Column(NamedTuple):
    name: str
    block: str
    population: str
    index: str
    values: np.ndarray


# axis kinds per block: "pop", "age", "year", "comp" (drift component 1/2)
BLOCK_AXES = {
    "alpha": ("pop", "age"),
    "beta": ("age",),
    "beta_pop": ("pop", "age"),
    "sigma2_beta": (),
    "sigma2_beta_pop": ("pop",),
    "kappa": ("year",),
    "kappa_pop": ("pop", "year"),
    "phi": ("comp",),
    "phi_pop": ("pop", "comp"),
    "rho": (),
    "rho_pop": ("pop",),
    "sigma2_kappa": (),
    "sigma2_kappa_pop": ("pop",),
    "w": ("pop", "comp"),
    "p": ("pop",),
    "nu": ("pop", "age", "year"),
    "sigma2_nu": ("pop",),
}


def _axis_labels(kind: str, populations, ages, years) -> list[str]:
    if kind == "pop":
        return [str(p) for p in populations]
    if kind == "age":
        return [str(int(a)) for a in ages]
    if kind == "year":
        return [str(int(y)) for y in years]
    return ["1", "2"]


def block_shape(block: str, populations, ages, years) -> tuple[int, ...]:
    return tuple(len(_axis_labels(k, populations, ages, years)) for k in BLOCK_AXES[block])


def iter_block_labels(block: str, populations, ages, years) -> Iterator[tuple[str, str]]:
    """(population, index) label pairs in C order over the block's non-population axes."""
    kinds = BLOCK_AXES[block]
    labels = [_axis_labels(k, populations, ages, years) for k in kinds]
    for combo in np.ndindex(*[len(l) for l in labels]) if labels else [()]:
        pop, idx = "", []
        for kind, lab, j in zip(kinds, labels, combo):
            if kind == "pop":
                pop = lab[j]
            else:
                idx.append(lab[j])
        yield pop, ",".join(idx)


def column_name(block: str, population: str, index: str) -> str:
    parts = [p for p in (population, index) if p]
    return f"{block}[{','.join(parts)}]" if parts else block


def scalar_columns(chain: ChainOutput, blocks=None) -> Iterator[Column]:
    """Yield one :class:`Column` per scalar parameter of the stored draws."""
    for block in blocks or [b for b in STORED_BLOCKS if b in chain.draws]:
        arr = np.asarray(chain.draws[block])
        flat = arr.reshape(arr.shape[0], -1)
        labels = iter_block_labels(block, chain.populations, chain.ages, chain.years)
        for j, (pop, idx) in enumerate(labels):
            yield Column(column_name(block, pop, idx), block, pop, idx, flat[:, j])


# -- manifest ----------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def build_manifest(chain: ChainOutput, dataset_hash: str, extra: dict | None = None) -> dict:
    """Run description; everything here is deterministic given (seed, config, data)."""
    import scipy

    body = {
        "package": "bplnlc",
        "version": __version__,
        "seed": int(chain.seed),
        "sampler": chain.config.to_dict(),
        "hyper": chain.hyper.to_dict(),
        "populations": list(chain.populations),
        "ages": [int(a) for a in chain.ages],
        "years": [int(y) for y in chain.years],
        "blocks": [b for b in STORED_BLOCKS if b in chain.draws],
        "dataset_hash": dataset_hash,
        "versions": {"numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()},
    }
    if extra:
        body.update(extra)
    body = _jsonable(body)
    body["hash"] = manifest_hash(body)
    return body


def manifest_hash(body: dict) -> str:
    payload = {k: v for k, v in body.items() if k != "hash"}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_manifest(manifest: dict, out_dir: str | Path) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    manifest = json.loads(path.read_text())
    if manifest.get("hash") != manifest_hash(manifest):
        raise ManifestMismatchError(f"{path}: manifest hash does not match its content")
    return manifest


def config_from_manifest(manifest: dict) -> tuple[SamplerConfig, Hyperparams]:
    sc = dict(manifest["sampler"])
    sc["target_band"] = tuple(sc["target_band"])
    sc["update_order"] = tuple(sc["update_order"])
    return SamplerConfig(**sc), Hyperparams.from_dict(manifest["hyper"])


def read_hash_header(path: str | Path) -> str | None:
    with open(path) as fh:
        first = fh.readline()
    return first[len(HASH_PREFIX):].strip() if first.startswith(HASH_PREFIX) else None


def check_hash(path: str | Path, expected: str) -> None:
    found = read_hash_header(path)
    if found != expected:
        raise ManifestMismatchError(f"{path}: manifest hash {found!r} does not match {expected!r}")


def write_table(df: pd.DataFrame, path: str | Path, manifest_hash_value: str | None = None, float_format="%.10g") -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if manifest_hash_value:
            fh.write(f"{HASH_PREFIX}{manifest_hash_value}\n")
        df.to_csv(fh, index=False, float_format=float_format, lineterminator="\n")
    return path


def read_table(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


# -- draws -------------------------------------------------------------------


def draws_matrix(chains: list[ChainOutput]) -> tuple[list[str], np.ndarray]:
    """Stack chains into (names, matrix) with leading ``chain`` and ``draw`` columns."""
    names, blocks = ["chain", "draw"], []
    for c, chain in enumerate(chains):
        cols = list(scalar_columns(chain))
        if c == 0:
            names += [col.name for col in cols]
        m = len(cols[0].values)
        block = np.empty((m, len(cols) + 2))
        block[:, 0] = c
        block[:, 1] = np.arange(m)
        for j, col in enumerate(cols):
            block[:, j + 2] = col.values
        blocks.append(block)
    return names, np.vstack(blocks)


def write_draws_csv(chains: list[ChainOutput], path: str | Path, manifest_hash_value: str | None = None) -> Path:
    """Columnar draws, ``%.17g`` so that values round-trip exactly."""
    names, mat = draws_matrix(chains)
    buf = _io.StringIO()
    if manifest_hash_value:
        buf.write(f"{HASH_PREFIX}{manifest_hash_value}\n")
    # names such as alpha[Female,0] hold commas, so quote them
    buf.write(",".join(f'"{n}"' if "," in n else n for n in names) + "\n")
    fmt = ["%d", "%d"] + ["%.17g"] * (len(names) - 2)
    np.savetxt(buf, mat, fmt=fmt, delimiter=",")
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def write_draws_cache(chains: list[ChainOutput], path: str | Path, manifest_hash_value: str = "") -> Path:
    """Binary copy of the draws (one array per block, chains concatenated)."""
    arrays = {f"block_{b}": np.concatenate([c.draws[b] for c in chains]) for b in chains[0].draws}
    arrays["chain"] = np.concatenate([np.full(c.n_draws, k) for k, c in enumerate(chains)])
    arrays["manifest_hash"] = np.array(manifest_hash_value)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)
    return path


def load_draws(out_dir: str | Path, manifest: dict) -> dict[str, np.ndarray]:
    """Draw arrays by block, from the binary cache when valid and the CSV otherwise."""
    out_dir = Path(out_dir)
    cache = out_dir / CACHE_NAME
    if cache.exists():
        with np.load(cache) as z:
            if str(z["manifest_hash"]) == manifest["hash"]:
                return {k[len("block_"):]: z[k] for k in z.files if k.startswith("block_")}
    csv = out_dir / DRAWS_NAME
    check_hash(csv, manifest["hash"])
    return read_draws_csv(csv, manifest)


def read_draws_csv(path: str | Path, manifest: dict) -> dict[str, np.ndarray]:
    df = pd.read_csv(path, comment="#", float_precision="round_trip")
    pops, ages, years = manifest["populations"], manifest["ages"], manifest["years"]
    out = {}
    for block in manifest["blocks"]:
        names = [column_name(block, p, i) for p, i in iter_block_labels(block, pops, ages, years)]
        missing = [n for n in names if n not in df.columns]
        if missing:
            raise ValueError(f"{path}: missing columns such as {missing[0]}")
        arr = df[names].to_numpy(dtype=float).reshape((len(df),) + block_shape(block, pops, ages, years))
        out[block] = arr.astype(np.int8) if block == "w" else arr
    return out


# -- summaries ---------------------------------------------------------------


def summary_table(chain_draws: dict[str, np.ndarray], populations, ages, years, level: float = 0.95,
                  blocks=None) -> pd.DataFrame:
    """Posterior median and HPD bounds per scalar parameter."""
    from .forecast import hpd_bounds

    rows = []
    for block in blocks or [b for b in STORED_BLOCKS if b in chain_draws]:
        arr = np.asarray(chain_draws[block], dtype=float)
        flat = arr.reshape(arr.shape[0], -1)
        med = np.median(flat, axis=0)
        try:
            lo, hi = hpd_bounds(flat, level)
        except ValueError as exc:  # too few draws for the level
            log.warning("summary of %s has no interval bounds: %s", block, exc)
            lo = hi = np.full(flat.shape[1], np.nan)
        for j, (pop, idx) in enumerate(iter_block_labels(block, populations, ages, years)):
            rows.append((block, pop, idx, med[j], lo[j], hi[j]))
    return pd.DataFrame(rows, columns=["block", "population", "index", "median", "hpd_lo", "hpd_hi"])
