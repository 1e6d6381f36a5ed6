"""Shared plumbing: seeded RNG derivation, parallel map, hashing, CSV rows."""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np


def derive_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Child generator for (master seed, structured key).

    Every random draw in the project comes from a generator created here, so
    a run is a pure function of the master seed and the key layout. Keys are
    (stage id, task ids...) tuples; see config.STAGE_* for the stage ids.
    """
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))


def default_workers() -> int:
    value = os.environ.get("RISLOC_WORKERS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def parallel_map(fn, items, workers: int | None = None) -> list:
    """Order-preserving map; plain map when workers <= 1.

    Results come back in input order regardless of worker count, so any
    reduction over them is deterministic.
    """
    items = list(items)
    if workers is None:
        workers = default_workers()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunk))


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def sha256_array(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values).tobytes()).hexdigest()


def format_cell(value) -> str:
    """CSV cell formatting; floats use repr so round-trips are bit-exact."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def append_csv_row(path, header: list[str], values: list) -> None:
    """Append one row, writing the header first if the file is new."""
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8") as fh:
        if new_file:
            fh.write(",".join(header) + "\n")
        fh.write(",".join(format_cell(v) for v in values) + "\n")
