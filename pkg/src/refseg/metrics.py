"""Evaluation metrics and analysis instruments.

Mask quality: IoU with cumulative (pixel-count) and global-mean aggregation,
plus the boundary-band variant of both.  Analysis: per-sample oracle upper
bound over all candidate masks, failure/misalignment breakdown at fixed
thresholds, fusion-gate statistics, and layer-wise condition drift.

All pixel counting is integer; ratios are formed once, at the end, so the
cumulative scores are exact folds over the record list.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensor import pool3

FAILURE_THRESHOLDS = (0.5, 0.2)


# ---------------------------------------------------------------------------
# plain-mask IoU


def binarize(logits: np.ndarray) -> np.ndarray:
    """sigmoid(logits) >= 0.5, i.e. logits >= 0."""
    return np.asarray(logits) >= 0.0


def _ratio(inter: int, union: int) -> float:
    # both masks empty -> perfect agreement by convention
    return 1.0 if union == 0 else inter / union


def mask_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int]:
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch {pred.shape} vs {gt.shape}")
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g))


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    return _ratio(*mask_counts(pred, gt))


# ---------------------------------------------------------------------------
# boundary bands


def band_width(shape: tuple[int, int]) -> int:
    """2% of the image diagonal, at least one pixel."""
    h, w = shape
    return max(1, round(0.02 * float(np.hypot(h, w))))


def boundary_band(mask: np.ndarray, d: int | None = None) -> np.ndarray:
    """Foreground pixels within d of the mask's boundary: the mask minus its
    d-fold 3x3 erosion (edge-replicated, so the image border is not itself
    a boundary)."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError("boundary_band expects a 2-D mask")
    if d is None:
        d = band_width(m.shape)
    if d < 1:
        raise ValueError("band width must be >= 1")
    eroded = m.astype(np.float64)
    for _ in range(d):
        eroded = pool3("min", eroded)
    return m & ~(eroded > 0.5)


def boundary_counts(pred: np.ndarray, gt: np.ndarray, d: int | None = None) -> tuple[int, int]:
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch {pred.shape} vs {gt.shape}")
    if d is None:
        d = band_width(pred.shape)
    return mask_counts(boundary_band(pred, d), boundary_band(gt, d))


def boundary_iou(pred: np.ndarray, gt: np.ndarray, d: int | None = None) -> float:
    return _ratio(*boundary_counts(pred, gt, d))


# ---------------------------------------------------------------------------
# per-sample records and aggregates


@dataclass
class OracleResult:
    oracle_index: int
    oracle_iou: float
    selected_iou: float
    gap: float


def oracle_analysis(candidate_logits: np.ndarray, gt: np.ndarray,
                    selected_index: int) -> OracleResult:
    """Best achievable IoU over all candidate masks (ties -> lowest index)."""
    ious = np.array([iou(binarize(candidate_logits[i]), gt)
                     for i in range(candidate_logits.shape[0])])
    oi = int(np.argmax(ious))
    sel = float(ious[selected_index])
    return OracleResult(oracle_index=oi, oracle_iou=float(ious[oi]),
                        selected_iou=sel, gap=float(ious[oi]) - sel)


@dataclass
class EvalRecord:
    sample_id: int
    selected_index: int
    oracle_index: int
    inter: int
    union: int
    band_inter: int
    band_union: int
    oracle_inter: int
    oracle_union: int
    gate_stats: list[tuple[float, float]] | None   # per-layer (mean, std); None when the gate path is off
    cond_cos: list[float]                          # leading entry is the layer-0 value, always 1

    @property
    def selected_iou(self) -> float:
        return _ratio(self.inter, self.union)

    @property
    def oracle_iou(self) -> float:
        return _ratio(self.oracle_inter, self.oracle_union)

    def validate(self) -> None:
        if self.oracle_iou < self.selected_iou:
            raise AssertionError(
                f"sample {self.sample_id}: oracle IoU {self.oracle_iou} < selected {self.selected_iou}")
        if self.cond_cos and self.cond_cos[0] != 1.0:
            raise AssertionError("layer-0 condition cosine must be 1")
        for c in self.cond_cos:
            if not -1.0 - 1e-12 <= c <= 1.0 + 1e-12:
                raise AssertionError(f"condition cosine {c} outside [-1, 1]")

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "selected_index": self.selected_index,
            "oracle_index": self.oracle_index,
            "selected_iou": self.selected_iou,
            "oracle_iou": self.oracle_iou,
            "inter": self.inter, "union": self.union,
            "band_inter": self.band_inter, "band_union": self.band_union,
            "oracle_inter": self.oracle_inter, "oracle_union": self.oracle_union,
            "gate_stats": self.gate_stats,
            "cond_cos": self.cond_cos,
        }


def _require(records):
    if not records:
        raise ValueError("no evaluation records")


def ciou(records: list[EvalRecord]) -> float:
    _require(records)
    return _ratio(sum(r.inter for r in records), sum(r.union for r in records))


def giou(records: list[EvalRecord]) -> float:
    _require(records)
    return float(np.mean([r.selected_iou for r in records]))


def cbiou(records: list[EvalRecord]) -> float:
    _require(records)
    return _ratio(sum(r.band_inter for r in records), sum(r.band_union for r in records))


def gbiou(records: list[EvalRecord]) -> float:
    _require(records)
    return float(np.mean([_ratio(r.band_inter, r.band_union) for r in records]))


def selection_accuracy(records: list[EvalRecord], tau: float = 0.5) -> float:
    _require(records)
    return float(np.mean([r.selected_iou >= tau for r in records]))


def misalignment_report(records: list[EvalRecord],
                        thresholds=FAILURE_THRESHOLDS) -> dict:
    """Failure set per threshold (selected IoU < tau) and, inside it, the
    misaligned subset whose oracle mask would have cleared the bar."""
    _require(records)
    n = len(records)
    out = {}
    for tau in thresholds:
        fails = [r for r in records if r.selected_iou < tau]
        mis = [r for r in fails if r.oracle_iou >= tau]
        out[f"{tau:g}"] = {
            "failures": len(fails),
            "failure_fraction": len(fails) / n,
            "misaligned": len(mis),
            "misaligned_fraction": (len(mis) / len(fails)) if fails else 0.0,
            "mean_selected_iou": float(np.mean([r.selected_iou for r in fails])) if fails else None,
            "mean_oracle_iou": float(np.mean([r.oracle_iou for r in fails])) if fails else None,
        }
    return out


# ---------------------------------------------------------------------------
# gate and condition-drift instruments


def gate_statistics(traces) -> list[tuple[float, float]]:
    """Per-layer (mean, std) of fusion-gate values over queries, dims, samples."""
    if not traces:
        raise ValueError("no traces")
    layers = len(traces[0].layers)
    out = []
    for li in range(layers):
        vals = []
        for tr in traces:
            g = tr.layers[li].gate
            if g is None:
                raise ValueError("gate statistics require the semantic path to be enabled")
            vals.append(g.data.ravel())
        v = np.concatenate(vals)
        out.append((float(v.mean()), float(v.std())))
    return out


def _token_cosines(c0: np.ndarray, cl: np.ndarray) -> np.ndarray:
    if np.array_equal(c0, cl):
        # identical conditions (e.g. refinement disabled) are exactly 1 by
        # definition, bypassing sqrt round-off
        return np.ones(c0.shape[0])
    num = (c0 * cl).sum(axis=1)
    den = np.linalg.norm(c0, axis=1) * np.linalg.norm(cl, axis=1)
    return num / np.maximum(den, 1e-30)


def condition_drift(traces) -> list[float]:
    """Mean cosine(C^(0), C^(l)) per layer, with the layer-0 entry first.

    Defined for every variant: with condition refinement off the conditions
    never move, so every entry is exactly 1.
    """
    if not traces:
        raise ValueError("no traces")
    layers = len(traces[0].layers)
    out = [1.0]
    for li in range(layers):
        per_sample = [float(_token_cosines(tr.initial_conditions.data,
                                           tr.layers[li].conditions.data).mean())
                      for tr in traces]
        out.append(float(np.mean(per_sample)))
    return out


def trace_gate_stats(trace) -> list[tuple[float, float, float, float]] | None:
    """Per-layer (mean, std, min, max) of the fusion gate for one trace."""
    if trace.layers[0].gate is None:
        return None
    return [(float(lt.gate.data.mean()), float(lt.gate.data.std()),
             float(lt.gate.data.min()), float(lt.gate.data.max()))
            for lt in trace.layers]


def trace_cond_cos(trace) -> list[float]:
    c0 = trace.initial_conditions.data
    return [1.0] + [float(_token_cosines(c0, lt.conditions.data).mean())
                    for lt in trace.layers]


def pooled_gate_stats(records: list[EvalRecord]) -> list[list[float]]:
    """Exact pooled per-layer (mean, std, min, max) from per-record stats.

    Every record aggregates the same number of gate values, so the pooled
    moments are plain averages of the per-record moments; extremes pool as
    extremes of extremes.
    """
    stats = [r.gate_stats for r in records]
    if all(s is None for s in stats):
        return []
    if any(s is None for s in stats):
        raise ValueError("mixed gate availability across records")
    layers = len(stats[0])
    out = []
    for li in range(layers):
        means = np.array([s[li][0] for s in stats])
        m2 = np.array([s[li][1] ** 2 + s[li][0] ** 2 for s in stats])
        mu = float(means.mean())
        var = max(float(m2.mean()) - mu * mu, 0.0)
        out.append([mu, float(np.sqrt(var)),
                    float(min(s[li][2] for s in stats)),
                    float(max(s[li][3] for s in stats))])
    return out


def pooled_cond_drift(records: list[EvalRecord]) -> list[float]:
    lists = [r.cond_cos for r in records]
    width = {len(c) for c in lists}
    if len(width) != 1:
        raise ValueError("inconsistent condition-drift record lengths")
    return [float(np.mean([c[i] for c in lists])) for i in range(width.pop())]


# ---------------------------------------------------------------------------
# report


def build_report(records: list[EvalRecord]) -> dict:
    """Aggregate report with a stable key order."""
    _require(records)
    for r in records:
        r.validate()
    return {
        "ciou": ciou(records),
        "giou": giou(records),
        "cbiou": cbiou(records),
        "gbiou": gbiou(records),
        "selection_accuracy": selection_accuracy(records),
        "oracle": {
            "ciou": _ratio(sum(r.oracle_inter for r in records),
                           sum(r.oracle_union for r in records)),
            "giou": float(np.mean([r.oracle_iou for r in records])),
            "mean_gap": float(np.mean([r.oracle_iou - r.selected_iou for r in records])),
            "index_match_rate": float(np.mean([r.oracle_index == r.selected_index
                                               for r in records])),
        },
        "misalignment": misalignment_report(records),
        "gates": pooled_gate_stats(records),
        "cond_drift": pooled_cond_drift(records),
    }


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"
