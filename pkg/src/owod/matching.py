"""Bipartite matching between prediction slots and ground-truth objects.

A cost matrix (rows = prediction slots, cols = targets) is solved for
the minimum-cost assignment. Among equal-cost optima the lexicographically
smallest pair list wins, so matching is a pure function of the costs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import geometry

# Deformable-DETR matching weights (classification, L1 box, gIoU).
DEFAULT_MATCH_WEIGHTS = (2.0, 5.0, 2.0)

# Relative tolerance for "same total cost" when canonicalizing ties.
_COST_RTOL = 1e-9


@dataclass(frozen=True)
class MatchResult:
    """Assignment of prediction slots to targets.

    ``pairs`` is sorted by prediction index; each target index appears
    exactly once when there are at least as many slots as targets.
    """

    pairs: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    @property
    def matched_prediction_indices(self) -> frozenset[int]:
        return frozenset(i for i, _ in self.pairs)

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[i, j] for i, j in self.pairs))

    def __len__(self) -> int:
        return len(self.pairs)


def _solve_min_cost(cost: np.ndarray) -> float:
    """Minimum assignment cost, or +inf when infeasible."""
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    try:
        ri, ci = linear_sum_assignment(cost)
    except ValueError:
        return float("inf")
    return float(cost[ri, ci].sum())


def _is_unique_optimum(cost: np.ndarray, rows: np.ndarray, cols: np.ndarray, best: float) -> bool:
    tol = _COST_RTOL * max(1.0, abs(best))
    for i, j in zip(rows, cols):
        banned = cost.copy()
        banned[i, j] = np.inf
        if _solve_min_cost(banned) <= best + tol:
            return False
    return True


def _lexicographic_pairs(cost: np.ndarray, best: float) -> tuple[tuple[int, int], ...]:
    """Greedily fix pairs in row-major order, keeping the total optimal."""
    n_rows, n_cols = cost.shape
    tol = _COST_RTOL * max(1.0, abs(best))
    pairs: list[tuple[int, int]] = []
    fixed = 0.0
    row_lo = 0
    avail = list(range(n_cols))
    for _ in range(min(n_rows, n_cols)):
        found = False
        for i in range(row_lo, n_rows):
            for j in avail:
                rest_cols = [c for c in avail if c != j]
                rest = cost[np.ix_(range(i + 1, n_rows), rest_cols)]
                total = fixed + cost[i, j] + _solve_min_cost(rest)
                if total <= best + tol:
                    pairs.append((i, j))
                    fixed += cost[i, j]
                    row_lo = i + 1
                    avail.remove(j)
                    found = True
                    break
            if found:
                break
        if not found:  # pragma: no cover - best is always attainable
            raise RuntimeError("failed to reconstruct an optimal assignment")
    return tuple(pairs)


def hungarian(cost: np.ndarray) -> MatchResult:
    """Minimum-cost assignment of columns (targets) to rows (slots).

    An empty cost matrix yields an empty match. Entries must be finite.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if cost.size == 0:
        return MatchResult(())
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix entries must be finite")

    ri, ci = linear_sum_assignment(cost)
    best = float(cost[ri, ci].sum())
    if _is_unique_optimum(cost, ri, ci, best):
        order = np.argsort(ri)
        return MatchResult(tuple((int(ri[k]), int(ci[k])) for k in order))
    return MatchResult(_lexicographic_pairs(cost, best))


def detr_match(
    pred_class_probs: np.ndarray,
    pred_boxes: np.ndarray,
    targets: list[tuple[int, np.ndarray]],
    weights: tuple[float, float, float] = DEFAULT_MATCH_WEIGHTS,
) -> MatchResult:
    """DETR-style match: cost = w_cls*(1-p) + w_l1*L1 + w_giou*(1-gIoU).

    ``targets`` are (class index, center-size box) pairs; there must be
    at most as many targets as prediction slots.
    """
    probs = np.asarray(pred_class_probs, dtype=np.float64)
    boxes = np.asarray(pred_boxes, dtype=np.float64)
    n_slots, n_classes = probs.shape
    if len(targets) == 0:
        return MatchResult(())
    if len(targets) > n_slots:
        raise ValueError(f"{len(targets)} targets exceed {n_slots} prediction slots")

    t_classes = np.array([c for c, _ in targets], dtype=np.int64)
    if np.any(t_classes < 0) or np.any(t_classes >= n_classes):
        raise ValueError("target class outside the currently-known range")
    t_boxes = np.stack([np.asarray(b, dtype=np.float64) for _, b in targets])

    w_cls, w_l1, w_giou = weights
    cost_cls = 1.0 - probs[:, t_classes]
    cost_l1 = np.abs(boxes[:, None, :] - t_boxes[None, :, :]).sum(axis=-1)
    cost_giou = 1.0 - geometry.giou_matrix(boxes, t_boxes)
    return hungarian(w_cls * cost_cls + w_l1 * cost_l1 + w_giou * cost_giou)
