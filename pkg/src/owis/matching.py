"""Optimal prediction-to-target assignment for query supervision.

The solver is scipy's linear_sum_assignment wrapped with a deterministic
tie-break: among all minimum-cost assignments, the one whose (target ->
query) tuple is lexicographically smallest is returned. The refinement
fixes one column at a time; only rows below the current incumbent can
improve lexicographically, and a cheap lower bound prunes most of those
before paying for a re-solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .validation import check_finite

DEFAULT_WEIGHTS = {"cls": 2.0, "bce": 5.0, "dice": 5.0}
PROB_EPS = 1e-7
_REL_TOL = 1e-9


def hungarian(cost) -> np.ndarray:
    """Minimum-cost injection of columns (targets) into rows (queries).

    Returns an array ``assign`` with ``assign[j]`` = row index matched to
    column j. Requires rows >= cols and finite entries. Among all optimal
    assignments, the lexicographically smallest tuple is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValidationError("cost matrix must be 2-D")
    n_rows, n_cols = cost.shape
    if n_cols == 0:
        return np.zeros(0, dtype=np.int64)
    if n_rows < n_cols:
        raise ValidationError(f"need rows >= cols, got {n_rows} x {n_cols}")
    check_finite(cost, "cost matrix")

    rows, cols = linear_sum_assignment(cost)
    tol = _REL_TOL * max(1.0, float(np.abs(cost).sum()))
    incumbent = {int(c): int(r) for r, c in zip(rows, cols)}  # an optimal completion
    remaining_opt = float(cost[rows, cols].sum())

    assign = np.empty(n_cols, dtype=np.int64)
    free_rows = list(range(n_rows))
    for j in range(n_cols):
        sub_cols = np.arange(j + 1, n_cols)
        if len(sub_cols):
            rest_bound = float(cost[np.ix_(free_rows, sub_cols)].min(axis=0).sum())
        chosen = incumbent[j]
        for r in free_rows:
            if r >= incumbent[j]:
                break  # larger rows can never be lexicographically better
            if len(sub_cols) == 0:
                total = float(cost[r, j])
                better = None
            else:
                if cost[r, j] + rest_bound > remaining_opt + tol:
                    continue
                others = [x for x in free_rows if x != r]
                sub = cost[np.ix_(others, sub_cols)]
                rr, cc = linear_sum_assignment(sub)
                total = float(cost[r, j] + sub[rr, cc].sum())
                better = {int(sub_cols[c]): others[int(i)] for i, c in zip(rr, cc)}
            if total <= remaining_opt + tol:
                chosen = r
                if better is not None:
                    incumbent = better
                break
        assign[j] = chosen
        free_rows.remove(chosen)
        remaining_opt -= float(cost[chosen, j])
    return assign


def _clamped(p):
    return np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)


def assignment_cost(class_probs, heatmap, target_label_index: int, target_mask, weights=None) -> float:
    """Matching cost of one prediction against one target.

    cls term: negative probability of the target's class (head index);
    bce term: mean binary cross-entropy of the heatmap against the mask,
    with probabilities clamped away from 0/1; dice term: one minus soft
    dice overlap.
    """
    w = dict(DEFAULT_WEIGHTS, **(weights or {}))
    probs = np.asarray(class_probs, dtype=np.float64)
    heat = np.asarray(heatmap, dtype=np.float64)
    mask = np.asarray(target_mask, dtype=np.float64)
    if heat.shape != mask.shape:
        raise ValidationError("heatmap/mask length mismatch")
    cls_term = -float(probs[target_label_index])
    h = _clamped(heat)
    bce = float(-(mask * np.log(h) + (1.0 - mask) * np.log(1.0 - h)).mean())
    denom = float(heat.sum() + mask.sum())
    dice = 1.0 - (2.0 * float((heat * mask).sum()) / denom if denom > 0 else 0.0)
    return w["cls"] * cls_term + w["bce"] * bce + w["dice"] * dice


def cost_matrix(class_probs, heatmaps, label_indices, target_masks, weights=None) -> np.ndarray:
    """Vectorized (n_queries, n_targets) matrix of assignment_cost values."""
    w = dict(DEFAULT_WEIGHTS, **(weights or {}))
    probs = np.asarray(class_probs, dtype=np.float64)
    heat = np.asarray(heatmaps, dtype=np.float64)
    masks = np.asarray(target_masks, dtype=np.float64)
    cls_term = -probs[:, np.asarray(label_indices, dtype=np.int64)]
    h = _clamped(heat)
    n = heat.shape[1]
    bce = -(np.log(h) @ masks.T + np.log(1.0 - h) @ (1.0 - masks).T) / n
    denom = heat.sum(axis=1)[:, None] + masks.sum(axis=1)[None, :]
    overlap = heat @ masks.T
    dice = 1.0 - np.divide(2.0 * overlap, denom, out=np.zeros_like(overlap), where=denom > 0)
    return w["cls"] * cls_term + w["bce"] * bce + w["dice"] * dice


@dataclass(frozen=True)
class Matching:
    """Result of assigning targets to queries."""

    pairs: tuple  # (query_index, target_index) per target
    unmatched_queries: tuple


def assign_targets(predictions, targets, label_indices, weights=None) -> Matching:
    """Hungarian assignment of every target to a distinct query.

    ``predictions`` is a sequence with ``class_probs`` and ``heatmap``
    attributes; ``targets`` a sequence with ``mask``; ``label_indices``
    gives each target's class-head index. Queries left unassigned are
    reported for no-object supervision.
    """
    n_q = len(predictions)
    k = len(targets)
    if k > n_q:
        raise ValidationError(f"{k} targets exceed {n_q} queries")
    if k == 0:
        return Matching(pairs=(), unmatched_queries=tuple(range(n_q)))
    cost = cost_matrix(
        np.stack([np.asarray(p.class_probs) for p in predictions]),
        np.stack([np.asarray(p.heatmap) for p in predictions]),
        label_indices,
        np.stack([np.asarray(t.mask, dtype=np.float64) for t in targets]),
        weights,
    )
    assign = hungarian(cost)
    pairs = tuple((int(assign[ti]), ti) for ti in range(k))
    matched = set(int(q) for q, _ in pairs)
    return Matching(
        pairs=pairs,
        unmatched_queries=tuple(q for q in range(n_q) if q not in matched),
    )
