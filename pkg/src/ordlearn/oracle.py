"""Exhaustive ordering search: the independent verifier for small instances.

Enumerates all d! orderings and scores each one, sharing the same local-score
cache the learned search uses.  Feasible up to d=8 (40320 orderings over at
most d*2^(d-1) distinct local scores).
"""
from __future__ import annotations

import itertools

from .datagen import Dataset
from .graphs import DirectedGraph, Ordering, is_supergraph, ordering_to_full_dag
from .scoring import ScoreCache, ScoreConfig, ordering_score

MAX_EXHAUSTIVE_D = 8


class OracleError(ValueError):
    pass


def score_all_orderings(
    data: Dataset, cfg: ScoreConfig, cache: ScoreCache | None = None
) -> list[tuple[Ordering, float]]:
    """(ordering, score) for every permutation, in lexicographic order."""
    if data.d > MAX_EXHAUSTIVE_D:
        raise OracleError(f"exhaustive search capped at d={MAX_EXHAUSTIVE_D}, got {data.d}")
    cache = cache or ScoreCache()
    return [
        (ordering := Ordering(perm), ordering_score(data, ordering, cfg, cache))
        for perm in itertools.permutations(range(data.d))
    ]


def best_ordering_exhaustive(
    data: Dataset, cfg: ScoreConfig, cache: ScoreCache | None = None
) -> tuple[Ordering, float]:
    """The argmax ordering and its score; ties broken lexicographically."""
    best_ordering = None
    best_score = -float("inf")
    for ordering, score in score_all_orderings(data, cfg, cache):
        if score > best_score:
            best_score = score
            best_ordering = ordering
    return best_ordering, best_score


def check_proposition1(
    data: Dataset,
    truth: DirectedGraph,
    cfg: ScoreConfig,
    tie_tol: float = 1e-6,
) -> bool:
    """Do all score-optimal orderings induce full DAGs covering the truth?

    Meaningful for identifiable SEM families at large sample sizes, where the
    optimal ordering's fully-connected DAG must be a super-graph of the true
    graph.  Orderings within ``tie_tol`` (absolute, widened by float noise
    relative to the score magnitude) of the maximum count as optimal.
    """
    if truth.d != data.d:
        raise OracleError(f"truth has {truth.d} nodes, data has {data.d}")
    scored = score_all_orderings(data, cfg)
    best = max(score for _, score in scored)
    slack = max(tie_tol, 1e-9 * abs(best))
    return all(
        is_supergraph(ordering_to_full_dag(ordering), truth)
        for ordering, score in scored
        if score >= best - slack
    )
