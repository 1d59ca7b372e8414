"""Shared plumbing: seeded streams, canonical float text, thread caps, errors."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1
SCHEMA_LINE = f"# cfl-schema-version: {SCHEMA_VERSION}"


class ConfigError(ValueError):
    """Invalid configuration or input data (CLI exit code 1)."""


class NumericalError(ArithmeticError):
    """A numerical procedure failed or degenerated (CLI exit code 2)."""


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, key...) without sequential coupling.

    Every consumer of randomness names its own key path, so domain ``i`` draws
    the same numbers whether domains are generated in order, in parallel, or
    alone. Negative keys (domain ids) wrap modulo 2**32.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**32, *(int(k) % 2**32 for k in keys)]))


def fmt(x: float) -> str:
    """Shortest decimal text that round-trips a 64-bit float."""
    return repr(float(x))


def n_threads() -> int:
    raw = os.environ.get("CFL_THREADS", "0").strip() or "0"
    n = int(raw)
    if n <= 0:
        n = os.cpu_count() or 1
    return n


def parallel_map(fn: Callable, items: Sequence, threads: int | None = None) -> list:
    """Order-preserving map; results are identical to a sequential loop."""
    threads = n_threads() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Write a numeric CSV preceded by the schema-version comment line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, [row for row in reader]


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path: str | Path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(to_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str | Path) -> Any:
    with open(path) as fh:
        return json.load(fh)
