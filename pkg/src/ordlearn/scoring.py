"""Decomposable BIC rewards with regression backends and score memoization.

The score of an ordering is the BIC of its fully-connected DAG: each
variable is regressed on everything that precedes it, and the total is the
sum of per-variable local scores.  Because the local score depends only on
(variable, parent set), scores are cached under that canonical key and the
per-step dense reward of the search decomposes the episodic reward exactly.

Scores are log-likelihood minus penalty, so larger is always better.

Variance modes for the linear backend:

* ``PerVariable`` -- each fit plugs in its own residual variance.  Note that
  for complete orderings this makes the Gaussian score ordering-invariant
  (the conditional variances multiply to the covariance determinant), so it
  cannot identify an ordering on linear-Gaussian data.
* ``Pooled`` -- the likelihood uses one fixed noise variance shared by all
  variables (the generating noise variance for equal-variance SEMs).  Sums
  of squared residuals then differ across orderings and the true ordering
  attains the maximum score in the large-sample limit.
"""
from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import Dataset, rbf_gram
from .graphs import Ordering, predecessors

SIGMA_FLOOR = 1e-12


class ScoreError(ValueError):
    """Raised for score queries the backend cannot answer."""


@dataclass(frozen=True)
class LocalScoreKey:
    """Canonical (variable, sorted parent tuple) cache key."""

    variable: int
    parents: tuple[int, ...]

    def __post_init__(self):
        parents = tuple(sorted(int(p) for p in self.parents))
        if self.variable in parents:
            raise ScoreError(f"variable {self.variable} cannot be its own parent")
        if len(set(parents)) != len(parents):
            raise ScoreError(f"duplicate parents in {parents}")
        object.__setattr__(self, "parents", parents)


@dataclass(frozen=True)
class ScoreConfig:
    backend: str = "LinearOLS"  # "LinearOLS" | "KernelRidgeGP"
    penalty_enabled: bool = True
    variance_mode: str = "PerVariable"  # "PerVariable" | "Pooled"
    pooled_variance: float = 1.0
    kernel_bandwidth: float = 1.0
    ridge: float = 1.0
    max_kernel_rows: int = 300

    def __post_init__(self):
        if self.backend not in ("LinearOLS", "KernelRidgeGP"):
            raise ScoreError(f"unknown backend {self.backend!r}")
        if self.variance_mode not in ("PerVariable", "Pooled"):
            raise ScoreError(f"unknown variance mode {self.variance_mode!r}")
        if self.ridge < 0:
            raise ScoreError(f"ridge must be nonnegative, got {self.ridge}")
        if self.kernel_bandwidth <= 0:
            raise ScoreError(f"kernel bandwidth must be positive, got {self.kernel_bandwidth}")
        if self.pooled_variance <= 0:
            raise ScoreError(f"pooled variance must be positive, got {self.pooled_variance}")


class ScoreCache:
    """Thread-safe memo of local scores keyed by (variable, parent set).

    Concurrent readers may race to compute the same key; both computations
    are pure and yield the identical value, so insert-if-absent keeps the
    cache consistent either way.
    """

    def __init__(self):
        self._store: dict[LocalScoreKey, float] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._store)

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def lookup(self, key: LocalScoreKey) -> float | None:
        with self._lock:
            if key in self._store:
                self.hits += 1
                return self._store[key]
            self.misses += 1
            return None

    def insert(self, key: LocalScoreKey, value: float) -> float:
        with self._lock:
            return self._store.setdefault(key, value)

    def save(self, path) -> None:
        lines = ["variable,parents,score"]
        with self._lock:
            items = sorted(self._store.items(), key=lambda kv: (kv[0].variable, kv[0].parents))
        for key, value in items:
            parents = ";".join(str(p) for p in key.parents)
            lines.append(f"{key.variable},{parents},{value!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ScoreCache":
        cache = cls()
        lines = Path(path).read_text().splitlines()
        for line in lines[1:]:
            if not line.strip():
                continue
            var, parents, score = line.split(",")
            key = LocalScoreKey(
                int(var), tuple(int(p) for p in parents.split(";") if p)
            )
            cache._store[key] = float(score)
        return cache


def cache_lookup_or_compute(
    cache: ScoreCache, data: Dataset, key: LocalScoreKey, cfg: ScoreConfig
) -> float:
    cached = cache.lookup(key)
    if cached is not None:
        return cached
    return cache.insert(key, local_score(data, key, cfg))


def local_score(data: Dataset, key: LocalScoreKey, cfg: ScoreConfig) -> float:
    """BIC contribution of one variable given a candidate parent set."""
    m = data.m
    if key.variable >= data.d or any(p >= data.d for p in key.parents):
        raise ScoreError(f"key {key} out of range for d={data.d}")
    if m < len(key.parents) + 2:
        raise ScoreError(f"m={m} too small for {len(key.parents)} parents")
    if cfg.backend == "LinearOLS":
        return _linear_score(data.data, key, cfg)
    return _kernel_score(data.data, key, cfg)


def ordering_score(data: Dataset, ordering: Ordering, cfg: ScoreConfig,
                   cache: ScoreCache | None = None) -> float:
    """BIC of the ordering's fully-connected DAG (the episodic reward)."""
    total = 0.0
    for node in ordering.perm:
        key = LocalScoreKey(node, tuple(predecessors(ordering, node)))
        if cache is None:
            total += local_score(data, key, cfg)
        else:
            total += cache_lookup_or_compute(cache, data, key, cfg)
    return total


def _gaussian_loglik(rss: float, m: int, cfg: ScoreConfig) -> float:
    if cfg.variance_mode == "Pooled":
        var = cfg.pooled_variance
        return -0.5 * m * math.log(2.0 * math.pi * var) - rss / (2.0 * var)
    var = max(rss / m, SIGMA_FLOOR)
    return -0.5 * m * (math.log(2.0 * math.pi * var) + 1.0)


def _linear_score(data: np.ndarray, key: LocalScoreKey, cfg: ScoreConfig) -> float:
    m = data.shape[0]
    y = data[:, key.variable]
    if not key.parents:
        resid = y - y.mean()
        rss = float(resid @ resid)
        n_params = 1
    else:
        design = np.column_stack([data[:, list(key.parents)], np.ones(m)])
        coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
        if rank < design.shape[1]:
            warnings.warn(
                f"singular design for {key}; refitting with ridge 1e-8",
                RuntimeWarning,
                stacklevel=2,
            )
            gram = design.T @ design + 1e-8 * np.eye(design.shape[1])
            coef = np.linalg.solve(gram, design.T @ y)
        resid = y - design @ coef
        rss = float(resid @ resid)
        n_params = len(key.parents) + 1
    score = _gaussian_loglik(rss, m, cfg)
    if cfg.penalty_enabled:
        score -= 0.5 * n_params * math.log(m)
    return score


def _kernel_score(data: np.ndarray, key: LocalScoreKey, cfg: ScoreConfig) -> float:
    # Kernel ridge regression stands in for GP regression: identical
    # predictive mean at fixed kernel and noise hyperparameters.  Rows are
    # deterministically capped to bound the O(m^3) solve.
    rows = min(data.shape[0], cfg.max_kernel_rows)
    y = data[:rows, key.variable]
    mean = y.mean()
    centered = y - mean
    if not key.parents:
        rss = float(centered @ centered)
        dof = 1.0
    else:
        x = data[:rows, list(key.parents)]
        gram = rbf_gram(x, bandwidth=cfg.kernel_bandwidth)
        ridge = cfg.ridge if cfg.ridge > 0 else 1e-8
        system = gram + ridge * np.eye(rows)
        try:
            alpha = np.linalg.solve(system, centered)
            smoother_trace = float(np.trace(np.linalg.solve(system, gram)))
        except np.linalg.LinAlgError:
            warnings.warn(
                f"singular kernel system for {key}; refitting with ridge 1e-8",
                RuntimeWarning,
                stacklevel=2,
            )
            system = gram + (ridge + 1e-8) * np.eye(rows)
            alpha = np.linalg.solve(system, centered)
            smoother_trace = float(np.trace(np.linalg.solve(system, gram)))
        resid = centered - gram @ alpha
        rss = float(resid @ resid)
        dof = 1.0 + smoother_trace  # intercept plus effective parameters
    var = max(rss / rows, SIGMA_FLOOR)
    score = -0.5 * rows * (math.log(2.0 * math.pi * var) + 1.0)
    if cfg.penalty_enabled:
        score -= 0.5 * dof * math.log(rows)
    return score
