"""Exact Wasserstein-1 between equal-size uniform point clouds, and the batch-averaged estimator.

With equal sizes and uniform weights an optimal coupling is a permutation,
so the transport problem is an assignment problem on the l1 cost matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from ._common import ConfigError, parallel_map, stream

log = logging.getLogger(__name__)


@dataclass
class PointCloud2:
    """``m`` joint samples ``(g(x), r)`` with uniform weights."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ConfigError(f"point cloud must be m x d with m >= 1, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ConfigError("point cloud has non-finite coordinates")

    @classmethod
    def from_signals(cls, g, r) -> "PointCloud2":
        return cls(np.column_stack([np.asarray(g, dtype=np.float64), np.asarray(r, dtype=np.float64)]))

    @property
    def m(self) -> int:
        return self.points.shape[0]


@dataclass
class TransportPlan:
    assignment: np.ndarray  # assignment[i] = j: mass 1/m moves from a_i to b_j
    cost: float

    @property
    def coupling(self) -> np.ndarray:
        m = len(self.assignment)
        P = np.zeros((m, m))
        P[np.arange(m), self.assignment] = 1.0 / m
        return P


def _cloud(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud2) else PointCloud2(x).points


def w1_exact(a, b) -> tuple[float, TransportPlan]:
    """Optimal l1-cost transport between two uniform clouds of equal size."""
    A, B = _cloud(a), _cloud(b)
    if A.shape != B.shape:
        raise ConfigError(f"clouds must have equal shape, got {A.shape} and {B.shape}")
    C = cdist(A, B, metric="cityblock")
    rows, cols = linear_sum_assignment(C)
    cost = float(C[rows, cols].mean())
    return cost, TransportPlan(cols, cost)


def w1_1d(x, y) -> float:
    """W1 of two equal-size 1-D empiricals: mean absolute difference of order statistics."""
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    y = np.sort(np.asarray(y, dtype=np.float64).ravel())
    if x.shape != y.shape:
        raise ConfigError(f"length mismatch: {x.size} vs {y.size}")
    return float(np.mean(np.abs(x - y)))


def _batches(rng, n: int, batches: int, batch_size: int) -> tuple[list[np.ndarray], bool]:
    need = batches * batch_size
    if n >= need:
        perm = rng.permutation(n)[:need]
        return [perm[k * batch_size : (k + 1) * batch_size] for k in range(batches)], False
    return [rng.choice(n, size=batch_size, replace=True) for _ in range(batches)], True


@dataclass
class WassersteinResult:
    term: float
    per_source: dict  # source id -> mean over validation domains
    table: list  # (source_domain, val_domain, batch_idx, w1)
    batches: int
    batch_size: int
    resampled: list  # domains that needed sampling with replacement

    def pair_means(self) -> dict:
        out: dict = {}
        for s, v, _, w in self.table:
            out.setdefault((s, v), []).append(w)
        return {k: float(np.mean(ws)) for k, ws in out.items()}


def wasserstein_term(clouds_src: dict, clouds_val: dict, batches: int = 25, batch_size: int = 200,
                     seed: int = 0, threads: int | None = None) -> WassersteinResult:
    """Batch-averaged W1 between every (source, validation) pair of ``(g(x), r)`` clouds.

    ``clouds_*`` map domain id -> (n x 2) array. Each domain is split into
    ``batches`` disjoint batches of ``batch_size`` by a permutation seeded from
    ``(seed, domain id)``; batch ``k`` of a source is matched against batch
    ``k`` of a validation domain. The term is the mean over sources of the
    mean over validation domains of the mean batch cost.
    """
    if not clouds_src or not clouds_val:
        raise ConfigError("wasserstein_term needs at least one source and one validation domain")
    if batches < 1 or batch_size < 1:
        raise ConfigError("batches and batch_size must be positive")
    split, resampled = {}, []
    for did, pts in {**clouds_src, **clouds_val}.items():
        pts = _cloud(pts)
        idx, fallback = _batches(stream(seed, 30, did), len(pts), batches, batch_size)
        if fallback:
            resampled.append(did)
            log.warning("domain %s has %d samples < %d x %d; batches drawn with replacement",
                        did, len(pts), batches, batch_size)
        split[did] = [pts[i] for i in idx]

    cells = [(s, v, k) for s in clouds_src for v in clouds_val for k in range(batches)]
    costs = parallel_map(lambda c: w1_exact(split[c[0]][c[2]], split[c[1]][c[2]])[0], cells, threads)
    table = [(s, v, k, w) for (s, v, k), w in zip(cells, costs)]
    per_source = {}
    for s in clouds_src:
        per_source[s] = float(np.mean([w for (ss, _, _, w) in table if ss == s]))
    term = float(np.mean(list(per_source.values())))
    return WassersteinResult(term, per_source, table, batches, batch_size, sorted(resampled))
