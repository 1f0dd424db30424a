"""Directed graphs, variable orderings and evaluation metrics.

The central correspondence used throughout the package: an ordering of the
d variables maps to the fully-connected DAG that has an edge from every
earlier variable to every later one.  Searching over orderings therefore
never produces a cyclic graph, and any DAG consistent with an ordering is a
subgraph of that fully-connected DAG.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


class GraphError(ValueError):
    """Raised for structurally invalid graphs, orderings or metric inputs."""


@dataclass(frozen=True)
class DirectedGraph:
    """Adjacency-matrix directed graph over nodes 0..d-1.

    ``edges[i, j] == True`` means there is an edge i -> j.  Instances are
    immutable after construction and safe to share across threads.
    """

    d: int
    edges: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.edges, dtype=bool)
        if self.d <= 0:
            raise GraphError(f"node count must be positive, got {self.d}")
        if adj.shape != (self.d, self.d):
            raise GraphError(f"adjacency shape {adj.shape} does not match d={self.d}")
        if adj.diagonal().any():
            raise GraphError("self-loops are not allowed")
        adj.setflags(write=False)
        object.__setattr__(self, "edges", adj)

    @classmethod
    def from_edge_list(cls, d: int, edge_list) -> "DirectedGraph":
        adj = np.zeros((d, d), dtype=bool)
        for i, j in edge_list:
            if not (0 <= i < d and 0 <= j < d):
                raise GraphError(f"edge ({i},{j}) out of range for d={d}")
            adj[i, j] = True
        return cls(d, adj)

    @classmethod
    def empty(cls, d: int) -> "DirectedGraph":
        return cls(d, np.zeros((d, d), dtype=bool))

    @property
    def num_edges(self) -> int:
        return int(self.edges.sum())

    def edge_set(self) -> frozenset[tuple[int, int]]:
        rows, cols = np.nonzero(self.edges)
        return frozenset(zip(rows.tolist(), cols.tolist()))

    def parents(self, node: int) -> tuple[int, ...]:
        if not 0 <= node < self.d:
            raise GraphError(f"node {node} out of range for d={self.d}")
        return tuple(np.nonzero(self.edges[:, node])[0].tolist())

    def is_acyclic(self) -> bool:
        return topological_order(self) is not None

    def to_csv(self, path) -> None:
        np.savetxt(path, self.edges.astype(int), fmt="%d", delimiter=",")

    @classmethod
    def from_csv(cls, path) -> "DirectedGraph":
        mat = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
        if mat.shape[0] != mat.shape[1]:
            raise GraphError(f"adjacency file {path} is {mat.shape}, expected square")
        vals = np.unique(mat)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise GraphError(f"adjacency file {path} contains non-0/1 entries {vals}")
        return cls(mat.shape[0], mat.astype(bool))


def topological_order(graph: DirectedGraph) -> list[int] | None:
    """One topological order via Kahn's algorithm, or None if cyclic."""
    indeg = graph.edges.sum(axis=0).astype(int)
    queue = [i for i in range(graph.d) if indeg[i] == 0]
    order: list[int] = []
    while queue:
        node = queue.pop()
        order.append(node)
        for succ in np.nonzero(graph.edges[node])[0]:
            indeg[succ] -= 1
            if indeg[succ] == 0:
                queue.append(int(succ))
    return order if len(order) == graph.d else None


@dataclass(frozen=True)
class Ordering:
    """A permutation of the node indices 0..d-1, earliest first."""

    perm: tuple[int, ...]

    def __post_init__(self):
        perm = tuple(int(p) for p in self.perm)
        if sorted(perm) != list(range(len(perm))):
            raise GraphError(f"{perm} is not a permutation of 0..{len(perm) - 1}")
        object.__setattr__(self, "perm", perm)

    @property
    def d(self) -> int:
        return len(self.perm)

    def position(self, node: int) -> int:
        try:
            return self.perm.index(node)
        except ValueError:
            raise GraphError(f"node {node} not in ordering of length {self.d}") from None


def predecessors(ordering: Ordering, node: int) -> frozenset[int]:
    """Nodes that come before ``node`` in the ordering (its candidate parents)."""
    pos = ordering.position(node)
    return frozenset(ordering.perm[:pos])


def ordering_to_full_dag(ordering: Ordering) -> DirectedGraph:
    """The fully-connected DAG of an ordering: edge from every earlier node to every later one."""
    d = ordering.d
    adj = np.zeros((d, d), dtype=bool)
    for p in range(d):
        for q in range(p + 1, d):
            adj[ordering.perm[p], ordering.perm[q]] = True
    return DirectedGraph(d, adj)


def is_supergraph(big: DirectedGraph, small: DirectedGraph) -> bool:
    """True iff every edge of ``small`` is also an edge of ``big``."""
    if big.d != small.d:
        raise GraphError(f"node counts differ: {big.d} vs {small.d}")
    return bool(np.all(big.edges | ~small.edges))


def consistent_orderings(graph: DirectedGraph, max_d: int = 10) -> set[Ordering]:
    """All orderings whose fully-connected DAG covers every edge of ``graph``.

    Equivalently, all topological orderings.  Enumeration is exponential, so
    the node count is capped.
    """
    if graph.d > max_d:
        raise GraphError(f"enumeration capped at d={max_d}, got d={graph.d}")
    if not graph.is_acyclic():
        raise GraphError("graph is cyclic; it has no consistent orderings")
    result = set()
    for perm in itertools.permutations(range(graph.d)):
        ordering = Ordering(perm)
        if is_supergraph(ordering_to_full_dag(ordering), graph):
            result.add(ordering)
    return result


@dataclass(frozen=True)
class GraphMetrics:
    tpr: float
    shd: int
    num_true_edges: int
    num_pred_edges: int


def compute_metrics(
    predicted: DirectedGraph,
    truth: DirectedGraph,
    reversed_counts_double: bool = False,
) -> GraphMetrics:
    """TPR and structural Hamming distance of a predicted DAG against the truth.

    SHD counts missing, extra and reversed edges.  A reversed edge counts as
    one error by default; set ``reversed_counts_double`` to count it as a
    deletion plus an insertion instead.
    """
    if predicted.d != truth.d:
        raise GraphError(f"node counts differ: {predicted.d} vs {truth.d}")
    pred = predicted.edge_set()
    true = truth.edge_set()
    if not true:
        if pred:
            raise GraphError("TPR undefined: truth has no edges but prediction does")
        return GraphMetrics(tpr=1.0, shd=0, num_true_edges=0, num_pred_edges=0)

    # Classify every unordered pair once so predictions with 2-cycles are
    # still charged for their spurious half.
    shd = 0
    pairs = {(min(i, j), max(i, j)) for (i, j) in true | pred}
    for i, j in pairs:
        in_true = {(i, j) in true, (j, i) in true}
        in_pred = {(i, j) in pred, (j, i) in pred}
        n_true = sum(in_true)
        n_pred = sum(in_pred)
        if n_true == 0:
            shd += n_pred  # extras
        elif n_pred == 0:
            shd += 1  # missing
        elif n_pred == 2:
            shd += 1  # correct direction present plus a spurious reverse
        elif ((i, j) in true) != ((i, j) in pred):
            shd += 2 if reversed_counts_double else 1  # reversed
    tpr = len(pred & true) / len(true)
    return GraphMetrics(
        tpr=tpr,
        shd=shd,
        num_true_edges=len(true),
        num_pred_edges=len(pred),
    )
