"""Full referring-segmentation model at desk scale.

Pipeline: pixel encoder (two 3x3 convolutions over RGB + normalized
coordinates, the first at stride 2) -> decoder over learned object queries
with condition tokens -> per-layer mask and score heads -> optional
boundary refinement of the final-layer masks.

Condition tokens come from a learned embedding table projected to model
width.  The embedding table stands in for a frozen language-model encoder:
the interface is "a handful of d-dimensional condition tokens", which is
all the decoder ever sees.  A separate learned global vector (zero at init)
is broadcast-added to the learned initial queries before decoding starts.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import Decoder, DecoderConfig, DecoderTrace
from .nn import MLPProjector, seeded_rng, xavier_uniform
from .refine import BarConfig, BoundaryRefiner
from .scenes import VOCAB_SIZE
from .tensor import Tensor


@dataclass
class ModelConfig:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    bar: BarConfig = field(default_factory=BarConfig)
    vocab_size: int = VOCAB_SIZE
    embed_dim: int = 32


class PixelEncoder:
    """(3, H, W) image -> (d, H/2, W/2) features.

    The last five output channels are pass-throughs: 2x2-mean-pooled RGB and
    the normalized coordinate grid, verbatim.  Keeping raw appearance and
    position in the feature map (rather than hoping the convolutions preserve
    them) lets attention content carry an object's color directly into the
    query state, which the selection head depends on; the learned channels
    are free to specialize for mask geometry.
    """

    PASSTHROUGH = 5  # 3 pooled RGB + 2 coordinate channels

    def __init__(self, dim: int, rng: np.random.Generator):
        if dim % 2:
            raise ValueError("encoder dim must be even")
        if dim <= self.PASSTHROUGH:
            raise ValueError("encoder dim must exceed the pass-through channels")
        self.dim = dim
        c_in = 5  # RGB + 2 coordinate channels
        c_out = dim - self.PASSTHROUGH
        self.w1 = Tensor(xavier_uniform((dim // 2, c_in, 3, 3), rng), requires_grad=True, name="enc.w1")
        self.b1 = Tensor(np.zeros(dim // 2), requires_grad=True, name="enc.b1")
        self.w2 = Tensor(xavier_uniform((c_out, dim // 2, 3, 3), rng), requires_grad=True, name="enc.w2")
        self.b2 = Tensor(np.zeros(c_out), requires_grad=True, name="enc.b2")

    @staticmethod
    def coord_grid(H: int, W: int) -> np.ndarray:
        ys = np.linspace(-1.0, 1.0, H)[:, None] * np.ones((1, W))
        xs = np.ones((H, 1)) * np.linspace(-1.0, 1.0, W)[None, :]
        return np.stack([ys, xs], axis=0)

    @classmethod
    def with_coords(cls, image: np.ndarray) -> np.ndarray:
        _, H, W = image.shape
        return np.concatenate(
            [np.asarray(image, dtype=np.float64), cls.coord_grid(H, W)], axis=0)

    def __call__(self, image: np.ndarray) -> Tensor:
        full = self.with_coords(image)
        x = Tensor(full[None])  # (1, 5, H, W)
        h = T.gelu(T.conv2d(x, self.w1, self.b1, stride=2))
        h = T.gelu(T.conv2d(h, self.w2, self.b2, stride=1))
        h = T.reshape(h, h.shape[1:])  # (d-5, H/2, W/2)
        _, Hh, Wh = h.shape
        rgb = full[:3].reshape(3, Hh, 2, Wh, 2).mean(axis=(2, 4))
        fixed = np.concatenate([rgb, self.coord_grid(Hh, Wh)], axis=0)
        return T.concat(h, Tensor(fixed), axis=0)  # (d, H/2, W/2)

    def parameters(self):
        return [("conv1.weight", self.w1), ("conv1.bias", self.b1),
                ("conv2.weight", self.w2), ("conv2.bias", self.b2)]


class Model:
    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        d = cfg.decoder.dim
        self.encoder = PixelEncoder(d, seeded_rng(seed, "encoder"))
        self.embed = Tensor(
            xavier_uniform((cfg.vocab_size, cfg.embed_dim), seeded_rng(seed, "embed")),
            requires_grad=True, name="embed")
        self.cond_proj = MLPProjector(cfg.embed_dim, 2 * cfg.embed_dim, d,
                                      seeded_rng(seed, "cond_proj"))
        self.q0 = Tensor(
            xavier_uniform((cfg.decoder.queries, d), seeded_rng(seed, "queries")),
            requires_grad=True, name="q0")
        # global vector mixed into every initial query (zero at init)
        self.query_prior = Tensor(np.zeros(d), requires_grad=True, name="query_prior")
        self.decoder = Decoder(cfg.decoder, seed)
        self.refiner = BoundaryRefiner(d, cfg.bar, seeded_rng(seed, "refiner"))

    # -- forward -----------------------------------------------------------

    def condition_tokens(self, tokens) -> Tensor:
        emb = T.rows(self.embed, np.asarray(tokens, dtype=np.intp))
        return self.cond_proj(emb)

    def initial_queries(self) -> Tensor:
        return T.add_bias(self.q0, self.query_prior)

    def forward(self, image: np.ndarray, tokens, refine: bool | None = None) -> DecoderTrace:
        """Run the full pipeline.

        refine=None applies boundary refinement iff the config enables it;
        True/False force it on/off for this call.
        """
        feats = self.encoder(image)
        c0 = self.condition_tokens(tokens)
        trace = DecoderTrace(
            initial_conditions=c0,
            pixel_features=feats,
            feature_tokens=T.transpose(
                T.reshape(feats, (feats.shape[0], feats.shape[1] * feats.shape[2]))),
        )
        trace = self.decoder(self.initial_queries(), c0, trace)
        do_refine = self.cfg.bar.enabled if refine is None else refine
        if do_refine:
            trace.refined_final = self.refiner(trace.final.mask_logits, feats)
        return trace

    __call__ = forward

    # -- parameters --------------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"encoder.{n}", p) for n, p in self.encoder.parameters()]
        out.append(("embed.table", self.embed))
        out += [(f"cond_proj.{n}", p) for n, p in self.cond_proj.parameters()]
        out.append(("queries.init", self.q0))
        out.append(("queries.prior", self.query_prior))
        out += [(f"decoder.{n}", p) for n, p in self.decoder.parameters()]
        out += [(f"refiner.{n}", p) for n, p in self.refiner.parameters()]
        names = [n for n, _ in out]
        if len(names) != len(set(names)):
            raise AssertionError("duplicate parameter names in registry")
        return out

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.parameters())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for _, p in self.parameters()))


def training_outputs(trace: DecoderTrace) -> list[tuple[Tensor, Tensor]]:
    """Per-layer (mask_logits, scores) pairs for deep supervision.

    When boundary refinement ran, the final layer is supervised through its
    refined masks; intermediate layers always use their raw masks.
    """
    out = [(lt.mask_logits, lt.scores) for lt in trace.layers]
    if trace.refined_final is not None:
        out[-1] = (trace.refined_final, trace.layers[-1].scores)
    return out


def neutralize_semantic_branch(model: Model) -> None:
    """Make every layer compute exactly its visual-only path, in place.

    Zeroes the semantic attention's value/output projections (so the branch
    emits exact zeros) and pins the fusion gate fully open: with the gate's
    weight zeroed and its bias at +50, sigmoid(50) rounds to 1.0 in float64,
    so Q_fused = 1.0 * Q_vis + 0.0 * 0 reproduces Q_vis bit for bit.
    """
    for layer in model.decoder.layers:
        for lin in (layer.attn_sem.v_proj, layer.attn_sem.out_proj):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0
        layer.gate.weight.data[...] = 0.0
        layer.gate.bias.data[...] = 50.0
