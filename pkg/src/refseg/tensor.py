"""Dense float tensors with tape-based reverse-mode automatic differentiation.

Everything downstream (attention blocks, the decoder, convolutions, losses)
is built from the ops in this module.  Ops execute eagerly on numpy arrays;
while a Tape is active each op appends its backward rule, and
``Tape.backward`` replays the rules in reverse order to accumulate gradients
into every reachable leaf.  With no active tape the same ops run in
evaluation mode and record nothing.

Every op validates shapes up front and checks its output for NaN/Inf —
a non-finite value anywhere in a forward pass is treated as a bug, not a
number.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT1_2 = 0.7071067811865476          # 1/sqrt(2)
_INV_SQRT_2PI = 0.3989422804014327     # 1/sqrt(2*pi)
_LN_EPS = 1e-5                         # layer_norm variance epsilon

_active_tape: "Tape | None" = None


class Tape:
    """Ordered record of executed ops; backward replays it in reverse."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a Tape is already active; nesting is not supported")
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = None
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward_fn) -> None:
        self._entries.append((out, inputs, backward_fn))

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf.

        Entries were appended in execution order, so a single reverse sweep
        sees every consumer of a tensor before the op that produced it.
        """
        if loss.data.ndim != 0:
            raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for out, inputs, backward_fn in reversed(self._entries):
            if out.grad is None:
                continue  # not on any path to the loss
            grads = backward_fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
                else:
                    t.grad = t.grad + g


class no_grad:
    """Context manager: temporarily stop recording onto the active tape."""

    def __enter__(self):
        global _active_tape
        self._saved = _active_tape
        _active_tape = None
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._saved
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'}{tag})"

    # small amount of sugar; the functional forms below are the real API
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(data: np.ndarray, op: str) -> None:
    # a single reduction: the sum is finite iff every element is (NaN and
    # +/-inf both propagate); cheaper than materializing an isfinite mask
    if not np.isfinite(np.sum(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


def _out(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    req = _active_tape is not None and any(t.requires_grad for t in inputs)
    t = Tensor(data, requires_grad=req)
    if req:
        _active_tape.record(t, inputs, backward_fn)
    return t


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails: never exponentiates a positive argument
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")
    return _out(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub shape mismatch {a.data.shape} vs {b.data.shape}")
    return _out(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return _out(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"div shape mismatch {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    out = ad / bd
    return _out(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _out(x.data * s, (x,), lambda g: (g * s,), "scale")


def add_const(x: Tensor, c) -> Tensor:
    return _out(x.data + c, (x,), lambda g: (g,), "add_const")


def mul_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if c.shape not in ((), x.data.shape):
        raise ValueError(f"mul_const shape mismatch {x.data.shape} vs {c.shape}")
    return _out(x.data * c, (x,), lambda g: (g * c,), "mul_const")


def sub_from_const(c, x: Tensor) -> Tensor:
    return _out(c - x.data, (x,), lambda g: (-g,), "sub_from_const")


def mul_scalar_tensor(x: Tensor, s: Tensor) -> Tensor:
    """Elementwise x * s where s is a learnable scalar (shape ())."""
    if s.data.ndim != 0:
        raise ValueError(f"mul_scalar_tensor expects scalar second arg, got {s.data.shape}")
    xd, sd = x.data, s.data
    return _out(xd * sd, (x, s), lambda g: (g * sd, np.sum(g * xd)), "mul_scalar_tensor")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]; gradient of b sums over leading axes."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"add_bias shape mismatch {x.data.shape} vs {b.data.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _out(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return _out(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _out(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def swapaxes(x: Tensor, i: int, j: int) -> Tensor:
    return _out(np.swapaxes(x.data, i, j).copy(), (x,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    na = a.data.shape[axis]

    def bw(g):
        ga, gb = np.split(g, [na], axis=axis)
        return ga, gb

    return _out(np.concatenate([a.data, b.data], axis=axis), (a, b), bw, "concat")


def rows(x: Tensor, idx) -> Tensor:
    """Gather rows along the leading axis; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    xd = x.data

    def bw(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return (gx,)

    return _out(xd[idx].copy(), (x,), bw, "rows")


def repeat_batch(x: Tensor, n: int) -> Tensor:
    """(1, ...) -> (n, ...) by repetition; backward sums over the batch."""
    if x.data.shape[0] != 1:
        raise ValueError("repeat_batch expects leading axis of size 1")
    return _out(np.repeat(x.data, n, axis=0), (x,), lambda g: (g.sum(axis=0, keepdims=True),), "repeat_batch")


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shp = x.data.shape

    def bw(g):
        return (np.broadcast_to(g, shp).copy(),)

    return _out(np.sum(x.data), (x,), bw, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shp = x.data.shape

    def bw(g):
        return (np.broadcast_to(g / n, shp).copy(),)

    return _out(np.mean(x.data), (x,), bw, "mean_all")


def sum_axes(x: Tensor, axes) -> Tensor:
    axes = tuple(sorted(axes if isinstance(axes, (tuple, list)) else (axes,)))
    shp = x.data.shape

    def bw(g):
        ge = g
        for ax in axes:
            ge = np.expand_dims(ge, ax)
        return (np.broadcast_to(ge, shp).copy(),)

    return _out(np.sum(x.data, axis=axes), (x,), bw, "sum_axes")


def mean_axes(x: Tensor, axes) -> Tensor:
    axes_t = tuple(sorted(axes if isinstance(axes, (tuple, list)) else (axes,)))
    n = 1
    for ax in axes_t:
        n *= x.data.shape[ax]
    return scale(sum_axes(x, axes_t), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner-dim mismatch {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return _out(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: (h, m, p) @ (h, p, n) -> (h, m, n)."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0]:
        raise ValueError(f"bmm shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.shape[2] != b.data.shape[1]:
        raise ValueError(f"bmm inner-dim mismatch {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return _out(
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g),
        "bmm",
    )


def bmm_nt(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul with the second factor transposed: (h, m, p) @ (h, n, p)^T -> (h, m, n)."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0]:
        raise ValueError(f"bmm_nt shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.shape[2] != b.data.shape[2]:
        raise ValueError(f"bmm_nt inner-dim mismatch {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return _out(
        ad @ bd.transpose(0, 2, 1),
        (a, b),
        lambda g: (g @ bd, g.transpose(0, 2, 1) @ ad),
        "bmm_nt",
    )


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[n, d_in] @ w[d_out, d_in]^T + b[d_out], fused into one tape entry."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"linear shape mismatch x{x.data.shape} w{w.data.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ValueError(f"linear bias shape {b.data.shape} vs {w.data.shape}")
    xd, wd = x.data, w.data
    return _out(
        xd @ wd.T + b.data,
        (x, w, b),
        lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)),
        "linear",
    )


# ---------------------------------------------------------------------------
# activations / normalization


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _out(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _out(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _out(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x), not the tanh approximation."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return _out(xd * phi, (x,), lambda g: (g * (phi + xd * pdf),), "gelu")


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        return {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "gelu": gelu}[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _out(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ValueError("layer_norm gamma/beta must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(x.data.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _out(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Batched 2-D convolution, kernel size 1 or 3, same padding for k=3.

    x: (B, C, H, W);  w: (C_out, C, k, k);  b: (C_out,).
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects x(B,C,H,W) and w(Co,C,k,k)")
    B, C, H, W = x.data.shape
    Co, Cw, k, k2 = w.data.shape
    if Cw != C or k != k2 or k not in (1, 3):
        raise ValueError(f"conv2d kernel shape {w.data.shape} incompatible with input {x.data.shape}")
    if b.data.shape != (Co,):
        raise ValueError("conv2d bias shape mismatch")
    p = 1 if k == 3 else 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (B, C, Ho, Wo, k, k), (s0, s1, s2 * stride, s3 * stride, s2, s3)
    )
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wmat = w.data.reshape(Co, C * k * k)
    out = (cols @ wmat.T + b.data).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        dw = (g2.T @ cols).reshape(w.data.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, k, k)
        dxp = np.zeros((B, C, Hp, Wp), dtype=np.float64)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki : ki + (Ho - 1) * stride + 1 : stride,
                    kj : kj + (Wo - 1) * stride + 1 : stride] += dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : Hp - p, p : Wp - p] if p else dxp
        return dx, dw, db

    return _out(out.copy(), (x, w, b), bw, "conv2d")


# ---------------------------------------------------------------------------
# losses (elementwise map; reductions composed from the ops above)


def bce_with_logits_map(logits: Tensor, targets) -> Tensor:
    """Per-element stable binary cross-entropy with logits (no reduction).

    targets is a constant array of the same shape with values in [0, 1].
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ValueError(f"bce target shape {t.shape} vs logits {logits.data.shape}")
    x = logits.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        return (g * (_sigmoid(x) - t),)

    return _out(out, (logits,), bw, "bce_with_logits_map")


# ---------------------------------------------------------------------------
# morphology (NOT differentiated: used only under stop-gradient)


def pool3(kind: str, x: np.ndarray) -> np.ndarray:
    """3x3 max- or min-pool on a 2-D array, edge-replication padding.

    Operates on plain numpy arrays by design: callers use it inside
    stop-gradient regions only (boundary extraction, band metrics).
    """
    if x.ndim != 2:
        raise ValueError("pool3 expects a 2-D array")
    if kind not in ("max", "min"):
        raise ValueError(f"pool3 kind must be 'max' or 'min', got {kind!r}")
    p = np.pad(x, 1, mode="edge")
    H, W = x.shape
    views = [p[i : i + H, j : j + W] for i in range(3) for j in range(3)]
    return np.maximum.reduce(views) if kind == "max" else np.minimum.reduce(views)
