"""Evaluation protocol: per-sample decode -> select -> optional boundary
refinement -> record, aggregated into the metrics report.

Refinement at evaluation applies to the whole candidate set so the oracle
is the exact counterfactual ("had we selected query i, its refined mask
would score ..."); the headline metrics read only the selected row.
"""
from __future__ import annotations

import json

import numpy as np

from .decoder import select_mask
from .metrics import (EvalRecord, band_width, binarize, boundary_band,
                      build_report, mask_counts, trace_cond_cos,
                      trace_gate_stats)
from .model import Model
from .scenes import SceneSample, downsample_masks
from .tensor import no_grad


def _band_counts(pred, gt, d):
    return mask_counts(boundary_band(pred, d), boundary_band(gt, d))


def evaluate_model(model: Model, dataset: list[SceneSample],
                   refine: bool | None = None,
                   eps: float | None = None) -> tuple[dict, list[EvalRecord]]:
    """refine=None follows the model config; eps overrides the boundary
    threshold for this evaluation only (used by the sweep)."""
    do_refine = model.cfg.bar.enabled if refine is None else refine
    records = []
    for sample in dataset:
        records.append(evaluate_sample(model, sample, do_refine, eps))
    return build_report(records), records


def evaluate_sample(model: Model, sample: SceneSample,
                    do_refine: bool, eps: float | None = None) -> EvalRecord:
    with no_grad():
        trace = model.forward(sample.image, sample.condition, refine=False)
        raw = trace.final.mask_logits
        if do_refine:
            candidates = model.refiner(raw, trace.pixel_features, eps=eps).data
        else:
            candidates = raw.data
    sel = select_mask(trace)
    gt = downsample_masks(sample.masks, 2)[sample.referred] > 0.5
    d = band_width(gt.shape)

    preds = binarize(candidates)
    ious = np.empty(preds.shape[0])
    for i in range(preds.shape[0]):
        inter_i, union_i = mask_counts(preds[i], gt)
        ious[i] = 1.0 if union_i == 0 else inter_i / union_i
    oracle = int(np.argmax(ious))

    inter, union = mask_counts(preds[sel], gt)
    b_inter, b_union = _band_counts(preds[sel], gt, d)
    o_inter, o_union = mask_counts(preds[oracle], gt)
    return EvalRecord(
        sample_id=sample.index, selected_index=sel, oracle_index=oracle,
        inter=inter, union=union, band_inter=b_inter, band_union=b_union,
        oracle_inter=o_inter, oracle_union=o_union,
        gate_stats=trace_gate_stats(trace), cond_cos=trace_cond_cos(trace))


def records_jsonl(records: list[EvalRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)


def eps_sweep(model: Model, dataset: list[SceneSample],
              eps_list: list[float]) -> list[dict]:
    """Boundary metrics per threshold; decode once per sample, refine per
    eps.  Rows come back sorted by eps."""
    staged = []
    for sample in dataset:
        with no_grad():
            trace = model.forward(sample.image, sample.condition, refine=False)
        sel = select_mask(trace)
        gt = downsample_masks(sample.masks, 2)[sample.referred] > 0.5
        staged.append((trace, sel, gt))

    rows = []
    for eps in sorted(eps_list):
        b_i = b_u = 0
        per_sample = []
        for trace, sel, gt in staged:
            with no_grad():
                refined = model.refiner(trace.final.mask_logits,
                                        trace.pixel_features, eps=eps).data
            pred = binarize(refined[sel])
            d = band_width(gt.shape)
            bi, bu = _band_counts(pred, gt, d)
            b_i += bi
            b_u += bu
            per_sample.append(1.0 if bu == 0 else bi / bu)
        rows.append({
            "eps": float(eps),
            "gbiou": float(np.mean(per_sample)),
            "cbiou": 1.0 if b_u == 0 else b_i / b_u,
        })
    return rows


def format_sweep(rows: list[dict]) -> str:
    lines = [f"{'eps':>6}  {'gbiou':>8}  {'cbiou':>8}"]
    for r in rows:
        lines.append(f"{r['eps']:>6.3g}  {r['gbiou']:>8.4f}  {r['cbiou']:>8.4f}")
    return "\n".join(lines) + "\n"
