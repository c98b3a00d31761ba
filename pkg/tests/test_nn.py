"""NN block tests: attention algebra, FFN, projector, reproducible init."""
import numpy as np
import pytest

from refseg import tensor as T
from refseg.gradcheck import grad_check
from refseg.nn import (FeedForward, Linear, MLPProjector, MultiHeadAttention,
                       QueryMLP, seeded_rng, xavier_uniform)
from refseg.tensor import Tensor


def test_seeded_rng_reproducible_and_tagged():
    a = seeded_rng(7, "block").normal(size=4)
    b = seeded_rng(7, "block").normal(size=4)
    c = seeded_rng(7, "other").normal(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_xavier_bounds():
    w = xavier_uniform((32, 16), seeded_rng(0, "w"))
    bound = np.sqrt(6.0 / 48.0)
    assert np.all(np.abs(w) <= bound)
    assert w.std() > 0.1 * bound


def test_linear_zero_bias_init():
    lin = Linear(4, 3, seeded_rng(1, "lin"))
    assert np.array_equal(lin.bias.data, np.zeros(3))


def test_mha_output_shape_and_weight_rows_sum_to_one():
    rng = seeded_rng(2, "mha")
    mha = MultiHeadAttention(8, 2, rng)
    q = Tensor(rng.normal(size=(5, 8)))
    k = Tensor(rng.normal(size=(7, 8)))
    out, w = mha(q, k, k, return_weights=True)
    assert out.shape == (5, 8)
    assert w.shape == (2, 5, 7)
    np.testing.assert_allclose(w.sum(axis=-1), np.ones((2, 5)), rtol=1e-12)


def test_mha_single_key_collapses_to_value_projection():
    # with one key token, every query receives the same projected value row
    rng = seeded_rng(3, "mha1")
    mha = MultiHeadAttention(8, 2, rng)
    q = Tensor(rng.normal(size=(6, 8)))
    kv = Tensor(rng.normal(size=(1, 8)))
    out = mha(q, kv, kv)
    for i in range(1, 6):
        np.testing.assert_allclose(out.data[i], out.data[0], rtol=1e-12)


def test_mha_zero_value_weight_gives_bias_rows():
    # W_V = 0 with zero biases (default init) -> output rows are exactly b_out
    rng = seeded_rng(4, "mhazero")
    mha = MultiHeadAttention(8, 2, rng)
    mha.v_proj.weight.data[:] = 0.0
    q = Tensor(rng.normal(size=(4, 8)))
    k = Tensor(rng.normal(size=(5, 8)))
    out = mha(q, k, k)
    assert np.array_equal(out.data, np.zeros((4, 8)))
    mha.out_proj.bias.data[:] = 1.5
    out2 = mha(q, k, k)
    assert np.array_equal(out2.data, np.full((4, 8), 1.5))


def test_mha_key_permutation_invariance():
    rng = seeded_rng(5, "mhaperm")
    mha = MultiHeadAttention(8, 4, rng)
    q = Tensor(rng.normal(size=(3, 8)))
    k = rng.normal(size=(6, 8))
    perm = np.array([4, 2, 0, 5, 1, 3])
    out1 = mha(q, Tensor(k), Tensor(k))
    out2 = mha(q, Tensor(k[perm]), Tensor(k[perm]))
    np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)


def test_mha_attn_mask_restricts_attention():
    rng = seeded_rng(6, "mhamask")
    mha = MultiHeadAttention(8, 2, rng)
    q = Tensor(rng.normal(size=(2, 8)))
    k = rng.normal(size=(4, 8))
    mask = np.zeros((2, 4), dtype=bool)
    mask[0, 1:] = True  # query 0 may only see key 0
    _, w = mha(q, Tensor(k), Tensor(k), attn_mask=mask, return_weights=True)
    np.testing.assert_allclose(w[:, 0, 1:], 0.0, atol=1e-12)
    np.testing.assert_allclose(w[:, 0, 0], 1.0, rtol=1e-12)


def test_mha_grad_fd():
    rng = seeded_rng(7, "mhagrad")
    mha = MultiHeadAttention(8, 2, rng)
    q = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    k = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    m = rng.normal(size=(3, 8))
    params = [("q", q), ("k", k)] + [(n, p) for n, p in mha.parameters()]
    report = grad_check(lambda: T.sum_all(T.mul_const(mha(q, k, k), m)), params)
    assert report.passed(1e-5), report.summary()


def test_ffn_zero_weights_zero_output():
    rng = seeded_rng(8, "ffn")
    ffn = FeedForward(8, rng)
    for _, p in ffn.parameters():
        p.data[:] = 0.0
    out = ffn(Tensor(rng.normal(size=(3, 8))))
    assert np.array_equal(out.data, np.zeros((3, 8)))


def test_ffn_hidden_is_4x_and_grad_fd():
    rng = seeded_rng(9, "ffn2")
    ffn = FeedForward(6, rng)
    assert ffn.fc1.weight.shape == (24, 6)
    x = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    m = rng.normal(size=(2, 6))
    report = grad_check(lambda: T.sum_all(T.mul_const(ffn(x), m)),
                        [("x", x)] + [(n, p) for n, p in ffn.parameters()])
    assert report.passed(1e-5), report.summary()


def test_projector_shapes_and_grad_fd():
    rng = seeded_rng(10, "proj")
    proj = MLPProjector(8, 16, 12, rng)
    x = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    out = proj(x)
    assert out.shape == (3, 12)
    m = rng.normal(size=(3, 12))
    report = grad_check(lambda: T.sum_all(T.mul_const(proj(x), m)),
                        [("x", x)] + [(n, p) for n, p in proj.parameters()])
    assert report.passed(1e-5), report.summary()


def test_query_mlp_constructed_identity():
    # identity weights + nonnegative input pass through ReLUs untouched
    rng = seeded_rng(11, "qmlp")
    mlp = QueryMLP(4, rng)
    for lin in (mlp.fc1, mlp.fc2, mlp.fc3):
        lin.weight.data[:] = np.eye(4)
        lin.bias.data[:] = 0.0
    x = np.abs(seeded_rng(12, "x").normal(size=(3, 4)))
    out = mlp(Tensor(x))
    assert np.array_equal(out.data, x)


def test_heads_must_divide_dim():
    with pytest.raises(ValueError):
        MultiHeadAttention(10, 4, seeded_rng(13, "bad"))
