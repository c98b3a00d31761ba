"""Ablation runner: trains flag variants over a shared seed set, evaluates
each on the same held-out data, and emits an ordered comparison table plus
a recovery analysis on the baseline's failure cases."""
from __future__ import annotations

import copy
import json

import numpy as np

from .config import RunConfig
from .evaluate import evaluate_model
from .model import Model
from .scenes import SceneSample
from .train import train

VARIANT_ORDER = ["baseline", "sr", "sr_cr", "full", "vis"]

_FLAGS = {
    # (semantic_refinement, condition_refinement, bar_enabled, semantic_source)
    "baseline": (False, False, False, "condition"),
    "sr":       (True, False, False, "condition"),
    "sr_cr":    (True, True, False, "condition"),
    "full":     (True, True, True, "condition"),
    "vis":      (True, False, False, "pixels"),
}

_METRICS = ("giou", "ciou", "gbiou", "cbiou", "selection_accuracy", "oracle_giou")


def variant_config(base: RunConfig, name: str) -> RunConfig:
    if name not in _FLAGS:
        raise ValueError(f"unknown ablation variant {name!r} (choose from {VARIANT_ORDER})")
    sr, cr, bar, source = _FLAGS[name]
    cfg = copy.deepcopy(base)
    cfg.decoder.semantic_refinement = sr
    cfg.decoder.condition_refinement = cr
    cfg.decoder.semantic_source = source
    cfg.bar.enabled = bar
    return cfg


def run_ablation(base: RunConfig, train_data: list[SceneSample],
                 eval_data: list[SceneSample], seeds: list[int],
                 steps: int | None = None, variants: list[str] | None = None,
                 progress=None) -> dict:
    variants = list(variants or VARIANT_ORDER)
    rows = []
    for name in variants:
        cfg = variant_config(base, name)
        for seed in seeds:
            if progress:
                progress(f"training variant={name} seed={seed}")
            model = Model(cfg.model_config(), seed=seed)
            train(model, train_data, cfg, seed=seed, steps=steps)
            report, records = evaluate_model(model, eval_data)
            row = {
                "variant": name,
                "seed": int(seed),
                "giou": report["giou"],
                "ciou": report["ciou"],
                "gbiou": report["gbiou"],
                "cbiou": report["cbiou"],
                "selection_accuracy": report["selection_accuracy"],
                "oracle_giou": report["oracle"]["giou"],
                "cond_drift": report["cond_drift"],
                "per_sample_iou": [r.selected_iou for r in records],
                "per_sample_oracle_iou": [r.oracle_iou for r in records],
            }
            if cfg.bar.enabled:
                # same weights with refinement bypassed: isolates the
                # boundary module's contribution on identical predictions
                raw_report, _ = evaluate_model(model, eval_data, refine=False)
                row["gbiou_unrefined"] = raw_report["gbiou"]
                row["cbiou_unrefined"] = raw_report["cbiou"]
            rows.append(row)
    means = {}
    for name in variants:
        sub = [r for r in rows if r["variant"] == name]
        means[name] = {m: float(np.mean([r[m] for r in sub])) for m in _METRICS}
    result = {
        "seeds": [int(s) for s in seeds],
        "steps": steps,
        "variants": variants,
        "rows": rows,
        "means": means,
    }
    if "baseline" in variants and "full" in variants:
        result["recovery"] = recovery_analysis(rows, seeds)
    return result


def recovery_analysis(rows: list[dict], seeds: list[int], tau: float = 0.5) -> dict:
    """On the baseline's failure cases (selected IoU < tau), compare the full
    model's mean IoU against the baseline's, per seed; also report the oracle
    upper bound on the same subset for both variants."""
    by = {(r["variant"], r["seed"]): r for r in rows}
    per_seed = []
    for seed in seeds:
        b, f = by[("baseline", seed)], by[("full", seed)]
        biou = np.array(b["per_sample_iou"])
        fiou = np.array(f["per_sample_iou"])
        fail = biou < tau
        n_fail = int(fail.sum())
        entry = {"seed": int(seed), "failures": n_fail}
        if n_fail:
            entry.update({
                "baseline_mean_iou": float(biou[fail].mean()),
                "full_mean_iou": float(fiou[fail].mean()),
                "margin": float(fiou[fail].mean() - biou[fail].mean()),
                "baseline_oracle_mean_iou": float(np.array(b["per_sample_oracle_iou"])[fail].mean()),
                "full_oracle_mean_iou": float(np.array(f["per_sample_oracle_iou"])[fail].mean()),
            })
        per_seed.append(entry)
    with_failures = [e for e in per_seed if e["failures"]]
    return {
        "tau": tau,
        "per_seed": per_seed,
        "mean_margin": float(np.mean([e["margin"] for e in with_failures])) if with_failures else None,
    }


def format_table(result: dict) -> str:
    cols = ["variant", "seed"] + list(_METRICS)
    lines = ["  ".join(f"{c:>18}" if c not in ("variant", "seed") else f"{c:>8}" for c in cols)]

    def fmt(r, seed_label):
        cells = [f"{r['variant']:>8}", f"{seed_label:>8}"]
        cells += [f"{r[m]:>18.4f}" for m in _METRICS]
        return "  ".join(cells)

    for r in result["rows"]:
        lines.append(fmt(r, str(r["seed"])))
    for name in result["variants"]:
        lines.append(fmt({"variant": name, **result["means"][name]}, "mean"))
    return "\n".join(lines) + "\n"


def dumps_result(result: dict) -> str:
    return json.dumps(result, indent=2) + "\n"
