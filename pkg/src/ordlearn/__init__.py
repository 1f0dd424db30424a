"""Causal structure discovery by RL search over variable orderings.

Pipeline: generate identifiable SEM data, search orderings with an
encoder/pointer-decoder policy trained against decomposable BIC rewards,
prune the best ordering's fully-connected DAG into the final graph, and
evaluate TPR/SHD against the ground truth.
"""

from .datagen import (
    Dataset,
    GraphSpec,
    SemSpec,
    generate,
    generate_gp,
    generate_linear,
    load_dataset,
    sample_graph,
    save_dataset,
    standardize,
)
from .graphs import (
    DirectedGraph,
    GraphMetrics,
    Ordering,
    compute_metrics,
    consistent_orderings,
    is_supergraph,
    ordering_to_full_dag,
    predecessors,
)
from .oracle import best_ordering_exhaustive, check_proposition1
from .pruning import PruneConfig, prune, prune_significance, prune_threshold
from .scoring import (
    LocalScoreKey,
    ScoreCache,
    ScoreConfig,
    cache_lookup_or_compute,
    local_score,
    ordering_score,
)
from .training import TrainConfig, TrainState, pretrain_supervised, run_episode, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DirectedGraph",
    "GraphMetrics",
    "GraphSpec",
    "LocalScoreKey",
    "Ordering",
    "PruneConfig",
    "ScoreCache",
    "ScoreConfig",
    "SemSpec",
    "TrainConfig",
    "TrainState",
    "best_ordering_exhaustive",
    "cache_lookup_or_compute",
    "check_proposition1",
    "compute_metrics",
    "consistent_orderings",
    "generate",
    "generate_gp",
    "generate_linear",
    "is_supergraph",
    "load_dataset",
    "local_score",
    "ordering_score",
    "ordering_to_full_dag",
    "predecessors",
    "pretrain_supervised",
    "prune",
    "prune_significance",
    "prune_threshold",
    "run_episode",
    "sample_graph",
    "save_dataset",
    "standardize",
    "train",
]
