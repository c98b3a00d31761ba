"""Boundary-aware mask refinement.

A thin convolutional head predicts a bounded correction to raw mask logits,
applied only inside a morphological boundary band.  The band comes from the
max/min-pool gradient of the mask probabilities and is never differentiated
through; the correction itself is tanh-bounded and scaled by a learnable
scalar, so refinement can only nudge logits near predicted edges, never
rewrite the mask (enhancement, not replacement).

eps = 1.0 makes the band empty (probability gradients live in [0, 1)), which
is the exact no-refinement baseline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import xavier_uniform
from .tensor import Tensor, no_grad, pool3


@dataclass
class BarConfig:
    enabled: bool = True
    eps: float = 0.1
    channels: int = 4       # compressed pixel-feature channels fed to the head
    alpha_init: float = 0.1


def boundary_mask(probs: np.ndarray, eps: float) -> np.ndarray:
    """Binary boundary band of one probability map: (dilate - erode) > eps.

    Operates on detached numpy probabilities; no gradients flow here.
    """
    if probs.ndim != 2:
        raise ValueError("boundary_mask expects a single 2-D probability map")
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must be in [0, 1], got {eps}")
    grad = pool3("max", probs) - pool3("min", probs)
    return (grad > eps).astype(np.float64)


class BoundaryRefiner:
    """f_comp (1x1 conv) + f_refine (two 3x3 convs, GELU between) + alpha."""

    def __init__(self, pixel_channels: int, cfg: BarConfig, rng: np.random.Generator):
        dc = cfg.channels
        self.cfg = cfg
        self.comp_w = Tensor(xavier_uniform((dc, pixel_channels, 1, 1), rng), requires_grad=True)
        self.comp_b = Tensor(np.zeros(dc), requires_grad=True)
        self.ref1_w = Tensor(xavier_uniform((dc, 1 + dc, 3, 3), rng), requires_grad=True)
        self.ref1_b = Tensor(np.zeros(dc), requires_grad=True)
        self.ref2_w = Tensor(xavier_uniform((1, dc, 3, 3), rng), requires_grad=True)
        self.ref2_b = Tensor(np.zeros(1), requires_grad=True)
        self.alpha = Tensor(np.asarray(float(cfg.alpha_init)), requires_grad=True)

    def parameters(self):
        return [
            ("comp.weight", self.comp_w), ("comp.bias", self.comp_b),
            ("refine1.weight", self.ref1_w), ("refine1.bias", self.ref1_b),
            ("refine2.weight", self.ref2_w), ("refine2.bias", self.ref2_b),
            ("alpha", self.alpha),
        ]

    def __call__(self, raw_logits: Tensor, pixel_features: Tensor, eps: float | None = None) -> Tensor:
        """Refine (N, H, W) raw mask logits against (C, H, W) pixel features."""
        eps = self.cfg.eps if eps is None else float(eps)
        n, H, W = raw_logits.shape
        with no_grad():
            probs = T.sigmoid(raw_logits).data
        band = np.stack([boundary_mask(probs[i], eps) for i in range(n)])[:, None]  # (N,1,H,W)

        comp = T.conv2d(T.reshape(pixel_features, (1,) + tuple(pixel_features.shape)),
                        self.comp_w, self.comp_b)               # (1, dc, H, W)
        comp = T.repeat_batch(comp, n)                          # (N, dc, H, W)
        inp = T.concat(T.reshape(raw_logits, (n, 1, H, W)), comp, axis=1)
        h = T.gelu(T.conv2d(inp, self.ref1_w, self.ref1_b))
        delta = T.tanh(T.conv2d(h, self.ref2_w, self.ref2_b))   # (N, 1, H, W) in (-1, 1)
        delta = T.mul_scalar_tensor(delta, self.alpha)
        correction = T.reshape(T.mul_const(delta, band), (n, H, W))
        return T.add(raw_logits, correction)
