"""Training loop: decoupled-weight-decay Adam, global-norm gradient
clipping, deterministic per-epoch shuffles, a TSV loss log, and final/best
checkpoints.  Everything is a pure function of (config, dataset, seed)."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .config import RunConfig
from .matching import segmentation_loss
from .model import Model, training_outputs
from .nn import seeded_rng
from .scenes import SceneSample, downsample_masks
from .tensor import Tape, Tensor


class TrainingError(RuntimeError):
    pass


class AdamW:
    """Adam with decoupled weight decay; decay skips 1-D parameters
    (biases, norm scales, scalars)."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]

    def clip_gradients(self) -> float:
        sq = 0.0
        for _, p in self.params:
            if p.grad is not None:
                sq += float((p.grad * p.grad).sum())
        norm = float(np.sqrt(sq))
        if self.clip_norm > 0.0 and norm > self.clip_norm:
            scale = self.clip_norm / norm
            for _, p in self.params:
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (self.m[i] / bias1) / (np.sqrt(self.v[i] / bias2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    best_step: int = 0
    best_loss: float = float("inf")
    final_path: str | None = None
    best_path: str | None = None


def _checkpoint_config(cfg: RunConfig, seed: int) -> dict:
    return {"seed": int(seed), **cfg.to_dict()}


def train(model: Model, dataset: list[SceneSample], cfg: RunConfig, seed: int,
          out_dir: str | None = None, log_stream=None, steps: int | None = None) -> TrainResult:
    if not dataset:
        raise TrainingError("empty training dataset")
    steps = cfg.optim.steps if steps is None else steps
    opt = AdamW(model.parameters(), lr=cfg.optim.learning_rate,
                beta1=cfg.optim.beta1, beta2=cfg.optim.beta2, eps=cfg.optim.eps,
                weight_decay=cfg.optim.weight_decay, clip_norm=cfg.optim.clip_norm)
    order_rng = seeded_rng(seed, "train.order")
    gt_small = [downsample_masks(s.masks, 2).astype(np.float64) for s in dataset]
    n = len(dataset)
    batch = max(1, int(cfg.optim.batch_size))

    result = TrainResult()
    best_params = None
    if log_stream is not None:
        log_stream.write("step\tlayer\tterm\tvalue\n")

    # One optimizer step consumes `batch` single-expression passes whose
    # gradients are averaged before the update; samples stream from
    # deterministic per-epoch shuffles regardless of batch boundaries.
    queue: list[int] = []
    for step in range(steps):
        opt.zero_grad()
        loss_val = 0.0
        term_sums = None
        for _ in range(batch):
            if not queue:
                queue = [int(i) for i in order_rng.permutation(n)]
            idx = queue.pop(0)
            sample = dataset[idx]
            try:
                with Tape() as tape:
                    trace = model.forward(sample.image, sample.condition)
                    total, detail = segmentation_loss(
                        training_outputs(trace), gt_small[idx], sample.referred, cfg.loss)
                    tape.backward(total)
            except FloatingPointError as e:
                raise TrainingError(
                    f"non-finite value at step {step} on sample {sample.index}: {e}") from None
            loss_val += float(total.data)
            if term_sums is None:
                term_sums = [[d.bce, d.dice, d.ce, d.total] for d in detail]
            else:
                for row, d in zip(term_sums, detail):
                    for j, v in enumerate((d.bce, d.dice, d.ce, d.total)):
                        row[j] += v
        if batch > 1:
            for _, p in model.parameters():
                if p.grad is not None:
                    p.grad /= batch
        norm = opt.clip_gradients()
        if not np.isfinite(norm):
            raise TrainingError(
                f"non-finite gradient norm at step {step} on sample {sample.index}")
        opt.step()

        loss_val /= batch
        result.losses.append(loss_val)
        if log_stream is not None:
            for li, row in enumerate(term_sums):
                for term, v in zip(("bce", "dice", "ce", "total"), row):
                    log_stream.write(f"{step}\t{li}\t{term}\t{v / batch:.10g}\n")
            log_stream.write(f"{step}\tall\ttotal\t{loss_val:.10g}\n")
        if loss_val < result.best_loss:
            result.best_loss = loss_val
            result.best_step = step
            best_params = [(name, p.data.copy()) for name, p in model.parameters()]

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        cfg_dict = _checkpoint_config(cfg, seed)
        final_path = os.path.join(out_dir, "final.ckpt")
        checkpoint.save(final_path, model, cfg_dict, step=steps)
        result.final_path = final_path
        best_path = os.path.join(out_dir, "best.ckpt")
        if best_params is None:  # zero steps: best == init == final
            best_params = [(name, p.data.copy()) for name, p in model.parameters()]
        with open(best_path, "wb") as fh:
            fh.write(checkpoint.dumps(best_params, cfg_dict, step=result.best_step))
        result.best_path = best_path
    return result
