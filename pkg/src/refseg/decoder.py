"""Query decoder with bidirectional query-condition interaction.

Per layer, in order: visual cross-attention (pre-norm, residual), gated
semantic cross-attention into the condition tokens, self-attention (pre-norm,
residual), condition refinement (conditions attend back into the queries,
plain residual), position-wise FFN (pre-norm, residual).

The two condition paths are flag-gated.  With both flags off the layer is a
standard visual-only decoder layer: conditions pass through untouched and
the computed queries are bitwise independent of them.  The semantic branch
fuses through a learned convex gate g = sigmoid(W_g [Q_vis || Q_sem]):
Q_fused = g * Q_vis + (1 - g) * Q_sem, computed in exactly that form.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import (FeedForward, LayerNorm, Linear, MultiHeadAttention, QueryMLP,
                 seeded_rng)
from .tensor import Tensor, no_grad


@dataclass
class DecoderConfig:
    layers: int = 3
    queries: int = 16
    dim: int = 64
    heads: int = 4
    semantic_refinement: bool = True
    condition_refinement: bool = True
    masked_attention: bool = True
    semantic_source: str = "condition"   # "pixels" = equal-parameter visual control

    def __post_init__(self):
        if self.semantic_source not in ("condition", "pixels"):
            raise ValueError(f"semantic_source must be 'condition' or 'pixels', got {self.semantic_source!r}")


@dataclass
class LayerTrace:
    queries: Tensor              # (N, d) post-FFN
    conditions: Tensor           # (T, d) post-refinement
    gate: Tensor | None          # (N, d); None when semantic refinement is off
    mask_logits: Tensor          # (N, H', W')
    scores: Tensor               # (N,)


@dataclass
class DecoderTrace:
    initial_conditions: Tensor   # C^(0), (T, d)
    pixel_features: Tensor       # (d, H', W')
    feature_tokens: Tensor       # (P, d)
    layers: list[LayerTrace] = field(default_factory=list)
    refined_final: Tensor | None = None   # set by the model when refinement ran

    @property
    def final(self) -> LayerTrace:
        return self.layers[-1]

    def final_mask_logits(self) -> Tensor:
        return self.refined_final if self.refined_final is not None else self.final.mask_logits


class DecoderLayer:
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        d, h = cfg.dim, cfg.heads
        self.cfg = cfg
        self.norm_vis = LayerNorm(d)
        self.attn_vis = MultiHeadAttention(d, h, rng)
        # identity-dominant value path: attended pixel content (including the
        # encoder's verbatim color/coordinate channels) enters the query
        # residual stream unrotated, so the selection head can read an
        # object's appearance without first undoing a random projection
        for lin in (self.attn_vis.v_proj, self.attn_vis.out_proj):
            lin.weight.data *= 0.1
            lin.weight.data += np.eye(d)
        self.attn_sem = MultiHeadAttention(d, h, rng)
        self.gate = Linear(2 * d, d, rng)
        self.norm_self = LayerNorm(d)
        self.attn_self = MultiHeadAttention(d, h, rng)
        self.attn_cond = MultiHeadAttention(d, h, rng)
        # the condition update is a bare residual (no norm), so start the
        # branch small: conditions drift gradually instead of being swamped
        self.attn_cond.out_proj.weight.data *= 0.05
        self.norm_ffn = LayerNorm(d)
        self.ffn = FeedForward(d, rng)
        # closing norm: every consumer of a layer's query state (mask head,
        # similarity head, next layer, foreground restriction) sees a bounded
        # vector.  Without it the mask head can sharpen its logits by simply
        # inflating the query stream, and the resulting large query-specific
        # offsets bury the attended pixel content the selection head needs.
        self.norm_out = LayerNorm(d)

    def __call__(self, q: Tensor, c: Tensor, feats: Tensor,
                 attn_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor | None]:
        q_vis = T.add(q, self.attn_vis(self.norm_vis(q), feats, feats, attn_mask=attn_mask))

        gate = None
        q_sem = None
        if self.cfg.semantic_refinement:
            kv = c if self.cfg.semantic_source == "condition" else feats
            q_sem = self.attn_sem(q_vis, kv, kv)
            gate = T.sigmoid(self.gate(T.concat(q_vis, q_sem, axis=1)))
            q_fused = T.add(T.mul(gate, q_vis), T.mul(T.sub_from_const(1.0, gate), q_sem))
        else:
            q_fused = q_vis
        self.last_fusion = (q_vis, q_sem, q_fused)  # inspection hook for tests

        h = self.norm_self(q_fused)
        q_s = T.add(q_fused, self.attn_self(h, h, h))

        if self.cfg.condition_refinement:
            c_out = T.add(c, self.attn_cond(c, q_s, q_s))  # plain residual, no extra norm
        else:
            c_out = c

        q_out = self.norm_out(T.add(q_s, self.ffn(self.norm_ffn(q_s))))
        return q_out, c_out, gate

    def parameters(self):
        out = []
        for tag, block in (
            ("norm_vis", self.norm_vis), ("attn_vis", self.attn_vis),
            ("attn_sem", self.attn_sem), ("gate", self.gate),
            ("norm_self", self.norm_self), ("attn_self", self.attn_self),
            ("attn_cond", self.attn_cond), ("norm_ffn", self.norm_ffn),
            ("ffn", self.ffn), ("norm_out", self.norm_out),
        ):
            out += [(f"{tag}.{n}", p) for n, p in block.parameters()]
        return out


class MaskHead:
    """Dot-product mask head: 3-layer query MLP against pixel features."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.mlp = QueryMLP(d, rng)

    def __call__(self, q: Tensor, feat_flat: Tensor, hw: tuple[int, int]) -> Tensor:
        """q (N, d), feat_flat (d, P) -> logits (N, H', W')."""
        logits = T.matmul(self.mlp(q), feat_flat)
        return T.reshape(logits, (q.shape[0],) + hw)

    def parameters(self):
        return [(f"mlp.{n}", p) for n, p in self.mlp.parameters()]


class SimilarityHead:
    """Query-condition compatibility: <W_cls Q_i, mean-pooled C> / sqrt(d).

    The same scalar serves as the selection score and the binary
    classification logit in the loss.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        self.proj = Linear(d, d, rng)
        # start aligned: score ~ <Q_i, mean(C)>/sqrt(d) at init, leaving the
        # head a small random fringe to learn corrections from
        self.proj.weight.data *= 0.25
        self.proj.weight.data += np.eye(d)
        self.d = d

    def __call__(self, q: Tensor, c: Tensor) -> Tensor:
        pooled = T.reshape(T.mean_axes(c, (0,)), (self.d, 1))
        s = T.matmul(self.proj(q), pooled)
        return T.scale(T.reshape(s, (q.shape[0],)), 1.0 / np.sqrt(self.d))

    def parameters(self):
        return [(f"proj.{n}", p) for n, p in self.proj.parameters()]


class Decoder:
    """L decoder layers plus shared mask and similarity heads."""

    def __init__(self, cfg: DecoderConfig, seed: int):
        self.cfg = cfg
        self.layers = [DecoderLayer(cfg, seeded_rng(seed, f"decoder.layer{i}"))
                       for i in range(cfg.layers)]
        self.mask_head = MaskHead(cfg.dim, seeded_rng(seed, "mask_head"))
        self.sim_head = SimilarityHead(cfg.dim, seeded_rng(seed, "sim_head"))

    def _attn_mask_from(self, q: Tensor, feat_flat: Tensor, hw: tuple[int, int]) -> np.ndarray:
        """Foreground restriction from the current mask estimate (stop-grad);
        queries whose estimate is all background fall back to full attention."""
        with no_grad():
            logits = self.mask_head(q, feat_flat, hw).data.reshape(q.shape[0], -1)
        mask = logits < 0.0  # sigmoid < 0.5
        full = mask.all(axis=1)
        mask[full] = False
        return mask

    def __call__(self, q0: Tensor, c0: Tensor, trace: DecoderTrace) -> DecoderTrace:
        hw = trace.pixel_features.shape[1:]
        feat_flat = T.reshape(trace.pixel_features, (trace.pixel_features.shape[0], hw[0] * hw[1]))
        q, c = q0, c0
        for layer in self.layers:
            attn_mask = None
            if self.cfg.masked_attention:
                attn_mask = self._attn_mask_from(q, feat_flat, hw)
            q, c, gate = layer(q, c, trace.feature_tokens, attn_mask=attn_mask)
            mask_logits = self.mask_head(q, feat_flat, hw)
            scores = self.sim_head(q, c)
            trace.layers.append(LayerTrace(
                queries=q, conditions=c, gate=gate, mask_logits=mask_logits, scores=scores))
        return trace

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"layer{i}.{n}", p) for n, p in layer.parameters()]
        out += [(f"mask_head.{n}", p) for n, p in self.mask_head.parameters()]
        out += [(f"sim_head.{n}", p) for n, p in self.sim_head.parameters()]
        return out


def select_mask(trace: DecoderTrace) -> int:
    """Argmax of final-layer scores; ties resolve to the lowest index."""
    return int(np.argmax(trace.final.scores.data))
