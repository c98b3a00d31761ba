"""Set matching and the composite segmentation loss.

Queries are matched to ground-truth objects with an exact Hungarian solver on
a lambda-weighted cost of classification, per-pixel BCE, and dice terms; the
loss then flows through the matched pairs only.  Costs are computed outside
the autodiff graph (the assignment is discrete), the loss inside it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad

DICE_SMOOTH = 1.0


@dataclass
class LossWeights:
    cls: float = 2.0
    mask: float = 5.0
    dice: float = 5.0


def hungarian_match(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of K objects (columns) to N queries (rows).

    Exact O(K^2 N) shortest-augmenting-path method with potentials.  Returns
    assign[k] = query index for object k; queries are distinct.  Ties are
    broken deterministically toward lower query indices.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be 2-D")
    n_q, n_obj = cost.shape
    if n_obj > n_q:
        raise ValueError(f"more objects ({n_obj}) than queries ({n_q})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")

    a = cost.T  # (K, N): rows are objects to place
    u = np.zeros(n_obj + 1)
    v = np.zeros(n_q + 1)
    p = np.zeros(n_q + 1, dtype=np.intp)    # p[j]: object (1-based) holding query j; 0 = free
    way = np.zeros(n_q + 1, dtype=np.intp)

    for i in range(1, n_obj + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n_q + 1, np.inf)
        used = np.zeros(n_q + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = a[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j0 = int(np.argmin(cand)) + 1       # argmin takes the first: lowest index on ties
            delta = cand[j0 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    assign = np.full(n_obj, -1, dtype=np.intp)
    for j in range(1, n_q + 1):
        if p[j] != 0:
            assign[p[j] - 1] = j - 1
    return assign


def brute_force_match(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Reference matcher: exhaustive permutation minimum (test oracle)."""
    from itertools import permutations

    n_q, n_obj = cost.shape
    best, best_total = None, np.inf
    for perm in permutations(range(n_q), n_obj):
        total = sum(cost[q, k] for k, q in enumerate(perm))
        if total < best_total - 1e-15:
            best, best_total = np.asarray(perm, dtype=np.intp), total
    return best, float(best_total)


# ---------------------------------------------------------------------------
# cost matrix (outside the graph)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def build_cost_matrix(mask_logits: np.ndarray, gt_masks: np.ndarray,
                      scores: np.ndarray, referred: int, w: LossWeights) -> np.ndarray:
    """(N, K) lambda-weighted matching cost.

    cost_cls prefers high-similarity queries for the referred object and
    low-similarity queries elsewhere; cost_bce / cost_dice are the mask terms
    evaluated pairwise.
    """
    n = mask_logits.shape[0]
    k = gt_masks.shape[0]
    ml = mask_logits.reshape(n, -1)
    gt = gt_masks.reshape(k, -1).astype(np.float64)
    npix = ml.shape[1]

    # pairwise mean BCE: mean_px [max(x,0) - x*t + log1p(exp(-|x|))]
    pos_part = (np.maximum(ml, 0.0) + np.log1p(np.exp(-np.abs(ml)))).sum(axis=1)  # (N,)
    cost_bce = (pos_part[:, None] - ml @ gt.T) / npix

    probs = _sigmoid_np(ml)
    inter = probs @ gt.T
    num = 2.0 * inter + DICE_SMOOTH
    den = probs.sum(axis=1)[:, None] + gt.sum(axis=1)[None, :] + DICE_SMOOTH
    cost_dice = 1.0 - num / den

    p = _sigmoid_np(scores)
    cost_cls = np.tile(-(1.0 - p)[:, None], (1, k))
    cost_cls[:, referred] = -p

    return w.cls * cost_cls + w.mask * cost_bce + w.dice * cost_dice


# ---------------------------------------------------------------------------
# loss terms (inside the graph)


def mask_bce_loss(pred_logits: Tensor, gt_masks: np.ndarray) -> Tensor:
    """Sum over masks of per-pixel mean BCE; pred and gt are (K, H, W)."""
    per_px = 1.0 / (gt_masks.shape[1] * gt_masks.shape[2])
    return T.scale(T.sum_all(T.bce_with_logits_map(pred_logits, gt_masks)), per_px)


def dice_loss(pred_logits: Tensor, gt_masks: np.ndarray) -> Tensor:
    """Sum over masks of smoothed dice loss; pred and gt are (K, H, W)."""
    p = T.sigmoid(pred_logits)
    inter = T.sum_axes(T.mul_const(p, gt_masks), (1, 2))
    psum = T.sum_axes(p, (1, 2))
    gsum = gt_masks.sum(axis=(1, 2))
    num = T.add_const(T.scale(inter, 2.0), DICE_SMOOTH)
    den = T.add_const(psum, gsum + DICE_SMOOTH)
    return T.sum_all(T.sub_from_const(1.0, T.div(num, den)))


def class_ce_loss(scores: Tensor, positive_query: int | None) -> Tensor:
    """Mean binary CE over query scores; one positive (or none)."""
    target = np.zeros(scores.shape[0])
    if positive_query is not None:
        target[positive_query] = 1.0
    return T.mean_all(T.bce_with_logits_map(scores, target))


@dataclass
class LayerLoss:
    total: float
    bce: float
    dice: float
    ce: float
    assignment: np.ndarray


def segmentation_loss(per_layer: list[tuple[Tensor, Tensor]], gt_masks: np.ndarray,
                      referred: int, w: LossWeights) -> tuple[Tensor, list[LayerLoss]]:
    """Deeply supervised total loss.

    per_layer: [(mask_logits (N,H,W), scores (N,))] in layer order; the caller
    substitutes refined logits for the final stage when refinement is on.
    All K ground-truth objects supervise every stage.
    """
    if gt_masks.shape[0] > per_layer[0][0].shape[0]:
        raise ValueError("more ground-truth objects than queries")
    total: Tensor | None = None
    detail: list[LayerLoss] = []
    for mask_logits, scores in per_layer:
        with no_grad():
            cost = build_cost_matrix(mask_logits.data, gt_masks, scores.data, referred, w)
        assign = hungarian_match(cost)
        matched = T.rows(mask_logits, assign)
        bce = mask_bce_loss(matched, gt_masks)
        dce = dice_loss(matched, gt_masks)
        ce = class_ce_loss(scores, int(assign[referred]))
        layer_total = T.add(T.add(T.scale(bce, w.mask), T.scale(dce, w.dice)), T.scale(ce, w.cls))
        detail.append(LayerLoss(
            total=float(layer_total.data), bce=float(bce.data),
            dice=float(dce.data), ce=float(ce.data), assignment=assign,
        ))
        total = layer_total if total is None else T.add(total, layer_total)
    return total, detail
