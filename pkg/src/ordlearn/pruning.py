"""Variable selection: carve the final DAG out of an ordering's full DAG.

Each variable is regressed on everything that precedes it in the ordering;
edges whose contribution is negligible are dropped.  Two rules:

* ``Threshold`` -- keep an edge iff the absolute OLS coefficient exceeds the
  threshold (default 0.3).  Intended for linear data.
* ``SignificanceTest`` -- keep an edge iff its covariate is significant at
  ``alpha`` (default 0.001).  The Linear basis uses per-coefficient t-tests;
  the Additive basis expands each predecessor in a cubic B-spline basis with
  knots at its quantiles and applies a group F-test per predecessor.

Every output is a subgraph of the ordering's fully-connected DAG and hence
acyclic by construction.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.interpolate import BSpline

from .datagen import Dataset
from .graphs import DirectedGraph, Ordering


class PruneError(ValueError):
    pass


@dataclass(frozen=True)
class PruneConfig:
    method: str = "Threshold"  # "Threshold" | "SignificanceTest"
    threshold: float = 0.3
    alpha: float = 0.001
    basis: str = "Linear"  # "Linear" | "Additive"
    spline_knots: int = 6

    def __post_init__(self):
        if self.method not in ("Threshold", "SignificanceTest"):
            raise PruneError(f"unknown prune method {self.method!r}")
        if self.basis not in ("Linear", "Additive"):
            raise PruneError(f"unknown basis {self.basis!r}")
        if self.threshold <= 0:
            raise PruneError(f"threshold must be positive, got {self.threshold}")
        if not 0 < self.alpha < 1:
            raise PruneError(f"alpha must be in (0,1), got {self.alpha}")


def _ols(design: np.ndarray, y: np.ndarray):
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        warnings.warn("singular design in pruning; ridge 1e-8 fallback", RuntimeWarning)
        gram = design.T @ design + 1e-8 * np.eye(design.shape[1])
        coef = np.linalg.solve(gram, design.T @ y)
    resid = y - design @ coef
    return coef, float(resid @ resid)


def prune_threshold(data: Dataset, ordering: Ordering, cfg: PruneConfig) -> DirectedGraph:
    graph, _ = prune_threshold_with_report(data, ordering, cfg)
    return graph


def prune_threshold_with_report(data: Dataset, ordering: Ordering, cfg: PruneConfig):
    adj = np.zeros((data.d, data.d), dtype=bool)
    report = []
    x = data.data
    for t, child in enumerate(ordering.perm):
        preds = list(ordering.perm[:t])
        if not preds:
            continue
        design = np.column_stack([x[:, preds], np.ones(data.m)])
        coef, _ = _ols(design, x[:, child])
        for k, parent in enumerate(preds):
            kept = abs(coef[k]) > cfg.threshold
            adj[parent, child] = kept
            report.append(
                {"parent": int(parent), "child": int(child),
                 "coefficient": float(coef[k]), "kept": bool(kept)}
            )
    return DirectedGraph(data.d, adj), report


def prune_significance(data: Dataset, ordering: Ordering, cfg: PruneConfig) -> DirectedGraph:
    graph, _ = prune_significance_with_report(data, ordering, cfg)
    return graph


def prune_significance_with_report(data: Dataset, ordering: Ordering, cfg: PruneConfig):
    adj = np.zeros((data.d, data.d), dtype=bool)
    report = []
    x = data.data
    for t, child in enumerate(ordering.perm):
        preds = list(ordering.perm[:t])
        if not preds:
            continue
        y = x[:, child]
        if cfg.basis == "Linear":
            entries = _linear_t_tests(x, y, preds, data.m)
        else:
            entries = _additive_f_tests(x, y, preds, data.m, cfg.spline_knots)
        for parent, stat_val, p_val in entries:
            kept = p_val <= cfg.alpha
            adj[parent, child] = kept
            report.append(
                {"parent": int(parent), "child": int(child),
                 "statistic": float(stat_val), "p_value": float(p_val),
                 "kept": bool(kept)}
            )
    return DirectedGraph(data.d, adj), report


def _linear_t_tests(x, y, preds, m):
    design = np.column_stack([x[:, preds], np.ones(m)])
    p = design.shape[1]
    dof = m - p
    if dof < 1:
        raise PruneError(f"no residual degrees of freedom: m={m}, p={p}")
    coef, rss = _ols(design, y)
    sigma2 = rss / dof
    xtx_inv = np.linalg.pinv(design.T @ design)
    out = []
    for k, parent in enumerate(preds):
        se = np.sqrt(max(sigma2 * xtx_inv[k, k], 1e-300))
        t_stat = coef[k] / se
        p_val = 2.0 * stats.t.sf(abs(t_stat), dof)
        out.append((parent, t_stat, p_val))
    return out


def _spline_basis(u: np.ndarray, n_knots: int) -> np.ndarray:
    """Cubic B-spline columns for one predictor, knots at its quantiles.

    The first basis column is dropped: the remaining columns plus a model
    intercept span the same space without the partition-of-unity collinearity.
    """
    lo, hi = u.min(), u.max()
    span = max(hi - lo, 1e-12)
    lo -= 1e-9 * span
    hi += 1e-9 * span
    quantiles = np.quantile(u, np.linspace(0, 1, n_knots + 2)[1:-1])
    interior = np.unique(np.clip(quantiles, lo, hi))
    if interior.size == 0:
        return u[:, None]  # effectively constant predictor; linear term only
    knots = np.concatenate([[lo] * 4, interior, [hi] * 4])
    basis = BSpline.design_matrix(u, knots, 3, extrapolate=True).toarray()
    return basis[:, 1:]


def _additive_f_tests(x, y, preds, m, n_knots):
    blocks = [_spline_basis(x[:, parent], n_knots) for parent in preds]
    full = np.column_stack(blocks + [np.ones(m)])
    p_full = full.shape[1]
    dof = m - p_full
    if dof < 1:
        raise PruneError(f"no residual degrees of freedom: m={m}, p={p_full}")
    _, rss_full = _ols(full, y)
    sigma2 = max(rss_full / dof, 1e-300)

    out = []
    for k, parent in enumerate(preds):
        reduced_blocks = [b for i, b in enumerate(blocks) if i != k]
        reduced = np.column_stack(reduced_blocks + [np.ones(m)])
        _, rss_reduced = _ols(reduced, y)
        q = blocks[k].shape[1]
        f_stat = max(rss_reduced - rss_full, 0.0) / q / sigma2
        p_val = stats.f.sf(f_stat, q, dof)
        out.append((parent, f_stat, p_val))
    return out


def prune(data: Dataset, ordering: Ordering, cfg: PruneConfig):
    """Dispatch on the configured method; returns (graph, per-edge report)."""
    if cfg.method == "Threshold":
        return prune_threshold_with_report(data, ordering, cfg)
    return prune_significance_with_report(data, ordering, cfg)
