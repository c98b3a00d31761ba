"""Command-line surface.

Verbs........: gen train eval ablate oracle eps-sweep gradcheck refine
Exit codes...: 0 success | 1 usage / bad config input | 2 runtime failure
Config.......: INI file via --config, plus repeatable --set section.key=value
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _status(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_cfg(args):
    from .config import load_config
    return load_config(getattr(args, "config", None), getattr(args, "set", None))


def _read_data(path):
    from .scenes import read_dataset
    _, _, samples = read_dataset(path)
    return samples


def _floats(text: str) -> list[float]:
    vals = [float(x) for x in text.split(",") if x.strip()]
    if not vals:
        raise ValueError(f"empty numeric list {text!r}")
    return vals


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# verbs


def cmd_gen(args) -> int:
    from .scenes import generate_dataset, write_dataset
    cfg = _load_cfg(args)
    spec = cfg.data.scene_spec()
    count = args.count if args.count is not None else cfg.data.count
    samples = generate_dataset(spec, args.seed, count)
    write_dataset(args.out, samples, spec, args.seed)
    _status(f"wrote {len(samples)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .model import Model
    from .train import train
    cfg = _load_cfg(args)
    data = _read_data(args.data)
    model = Model(cfg.model_config(), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.tsv", "w") as log:
        result = train(model, data, cfg, seed=args.seed, out_dir=str(out),
                       log_stream=log, steps=args.steps)
    _status(f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}"
            f" over {len(result.losses)} steps" if result.losses else "0 steps")
    _status(f"final={result.final_path} best={result.best_path} (step {result.best_step})")
    return 0


def _eval_setup(args):
    from .checkpoint import build_model
    model, _, _ = build_model(args.ckpt)
    return model, _read_data(args.data)


def cmd_eval(args) -> int:
    from .evaluate import evaluate_model, records_jsonl
    from .metrics import dumps_report
    model, data = _eval_setup(args)
    refine = False if args.no_refine else None
    report, records = evaluate_model(model, data, refine=refine, eps=args.eps)
    _emit(dumps_report(report), args.out)
    if args.records:
        Path(args.records).write_text(records_jsonl(records))
    return 0


def cmd_oracle(args) -> int:
    from .evaluate import evaluate_model
    model, data = _eval_setup(args)
    report, _ = evaluate_model(model, data)
    view = {k: report[k] for k in ("selection_accuracy", "oracle", "misalignment")}
    _emit(json.dumps(view, indent=2) + "\n", args.out)
    return 0


def cmd_eps_sweep(args) -> int:
    from .evaluate import eps_sweep, format_sweep
    model, data = _eval_setup(args)
    rows = eps_sweep(model, data, _floats(args.eps))
    if args.out:
        _emit(json.dumps(rows, indent=2) + "\n", args.out)
    sys.stdout.write(format_sweep(rows))
    return 0


def cmd_ablate(args) -> int:
    from .ablate import dumps_result, format_table, run_ablation
    cfg = _load_cfg(args)
    train_data = _read_data(args.data)
    eval_data = _read_data(args.eval_data)
    variants = args.variants.split(",") if args.variants else None
    result = run_ablation(cfg, train_data, eval_data, _ints(args.seeds),
                          steps=args.steps, variants=variants, progress=_status)
    if args.out:
        _emit(dumps_result(result), args.out)
    sys.stdout.write(format_table(result))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    report = run_suite(tol=args.tol, h=args.step)
    sys.stdout.write(report.format())
    return 0 if report.passed else 2


def cmd_refine(args) -> int:
    from . import fstn
    from .checkpoint import build_model
    from .tensor import Tensor, no_grad
    model, _, _ = build_model(args.ckpt)
    masks = fstn.read(args.masks)
    feats = fstn.read(args.features)
    with no_grad():
        refined = model.refiner(Tensor(masks), Tensor(feats), eps=args.eps)
    fstn.write(args.out, refined.data)
    _status(f"wrote refined logits {refined.data.shape} to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    p = _Parser(prog="refseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(fn=fn)
        return sp

    def cfg_flags(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="config override (repeatable)")

    sp = add("gen", cmd_gen, help="generate a synthetic referring dataset")
    cfg_flags(sp)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True, help="dataset directory to create")
    sp.add_argument("--count", type=int, help="override [data] count")

    sp = add("train", cmd_train, help="train a model on a generated dataset")
    cfg_flags(sp)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="run directory for checkpoints + log")
    sp.add_argument("--steps", type=int, help="override [optim] steps")

    sp = add("eval", cmd_eval, help="evaluate a checkpoint, emit the metrics report")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", help="report path (default: stdout)")
    sp.add_argument("--records", help="also write per-sample records (JSONL)")
    sp.add_argument("--eps", type=float, help="boundary threshold override")
    sp.add_argument("--no-refine", action="store_true", help="disable refinement")

    sp = add("oracle", cmd_oracle, help="selection vs. best-candidate analysis")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")

    sp = add("eps-sweep", cmd_eps_sweep, help="boundary metrics across thresholds")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--eps", required=True, help="comma-separated thresholds")
    sp.add_argument("--out", help="also write rows as JSON")

    sp = add("ablate", cmd_ablate, help="train + evaluate flag variants over seeds")
    cfg_flags(sp)
    sp.add_argument("--data", required=True, help="training dataset directory")
    sp.add_argument("--eval-data", required=True, help="held-out dataset directory")
    sp.add_argument("--seeds", required=True, help="comma-separated seeds")
    sp.add_argument("--steps", type=int, help="override [optim] steps")
    sp.add_argument("--variants", help="comma-separated subset to run")
    sp.add_argument("--out", help="also write full results as JSON")

    sp = add("gradcheck", cmd_gradcheck, help="finite-difference gradient suite")
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--step", type=float, default=1e-5, help="finite-difference h")

    sp = add("refine", cmd_refine, help="apply boundary refinement to stored logits")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--masks", required=True, help="raw mask logits (.fstn)")
    sp.add_argument("--features", required=True, help="pixel features (.fstn)")
    sp.add_argument("--out", required=True, help="refined logits path (.fstn)")
    sp.add_argument("--eps", type=float, help="boundary threshold override")

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except Exception as exc:  # runtime failure contract: report, exit 2
        from .config import ConfigError
        print(f"refseg {args.verb}: error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc, ConfigError) else 2


if __name__ == "__main__":
    sys.exit(main())
