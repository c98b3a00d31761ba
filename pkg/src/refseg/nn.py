"""Neural building blocks: linear layers, multi-head attention, FFN, projector.

All blocks are plain Python objects holding parameter Tensors; forward passes
are ordinary function calls on the autodiff ops.  Initialization is
Xavier-uniform for weight matrices and zero for biases, drawn from a Philox
stream keyed by (seed, block name) so every block is reproducible in
isolation.
"""
from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


def seeded_rng(seed: int, tag: str) -> np.random.Generator:
    """Philox counter-based stream keyed by the run seed and a purpose tag."""
    key = np.array([np.uint64(seed), np.uint64(zlib.crc32(tag.encode()))], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def xavier_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    fan_in, fan_out = shape[-1], shape[0]
    if len(shape) == 4:  # conv kernels: (Co, C, k, k)
        rf = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = Tensor(xavier_uniform((d_out, d_in), rng), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class LayerNorm:
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class MultiHeadAttention:
    """Standard scaled dot-product attention with h heads.

    Queries/keys/values are 2-D (tokens, d).  An optional boolean attn_mask
    of shape (n_q, n_k) marks key positions a query must NOT attend to;
    masked logits are set to -1e9 before the softmax.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads != 0:
            raise ValueError(f"model dim {d} not divisible by heads {heads}")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def _split(self, x: Tensor, n: int) -> Tensor:
        # (n, d) -> (heads, n, head_dim)
        return T.swapaxes(T.reshape(x, (n, self.heads, self.head_dim)), 0, 1)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, attn_mask: np.ndarray | None = None,
                 return_weights: bool = False):
        n_q, n_k = q.shape[0], k.shape[0]
        qh = self._split(self.q_proj(q), n_q)
        kh = self._split(self.k_proj(k), n_k)
        vh = self._split(self.v_proj(v), n_k)
        logits = T.scale(T.bmm_nt(qh, kh), 1.0 / np.sqrt(self.head_dim))
        if attn_mask is not None:
            if attn_mask.shape != (n_q, n_k):
                raise ValueError(f"attn_mask shape {attn_mask.shape} vs ({n_q}, {n_k})")
            penalty = np.where(attn_mask[None, :, :], -1e9, 0.0)
            logits = T.add_const(logits, penalty)
        attn = T.softmax(logits, axis=-1)
        mixed = T.bmm(attn, vh)  # (heads, n_q, head_dim)
        merged = T.reshape(T.swapaxes(mixed, 0, 1), (n_q, self.d))
        out = self.out_proj(merged)
        if return_weights:
            return out, attn.data.copy()
        return out

    def parameters(self):
        out = []
        for tag, lin in (("q", self.q_proj), ("k", self.k_proj), ("v", self.v_proj), ("out", self.out_proj)):
            out += [(f"{tag}_proj.{n}", p) for n, p in lin.parameters()]
        return out


class FeedForward:
    """Two-layer position-wise MLP with GELU, hidden = 4x model dim."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = 4 * d if hidden is None else hidden
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def parameters(self):
        return [(f"fc1.{n}", p) for n, p in self.fc1.parameters()] + \
               [(f"fc2.{n}", p) for n, p in self.fc2.parameters()]


class MLPProjector:
    """Two linear layers with GELU between: maps condition embeddings into
    the decoder's model dimension."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def parameters(self):
        return [(f"fc1.{n}", p) for n, p in self.fc1.parameters()] + \
               [(f"fc2.{n}", p) for n, p in self.fc2.parameters()]


class QueryMLP:
    """Three-layer query MLP (d -> d -> d) with ReLU between layers."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.fc1 = Linear(d, d, rng)
        self.fc2 = Linear(d, d, rng)
        self.fc3 = Linear(d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc3(T.relu(self.fc2(T.relu(self.fc1(x)))))

    def parameters(self):
        out = []
        for tag, lin in (("fc1", self.fc1), ("fc2", self.fc2), ("fc3", self.fc3)):
            out += [(f"{tag}.{n}", p) for n, p in lin.parameters()]
        return out
