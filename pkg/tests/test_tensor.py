"""Tensor-core tests: hand oracles for every op, finite differences for grads."""
import math

import numpy as np
import pytest

from refseg import tensor as T
from refseg.gradcheck import grad_check
from refseg.tensor import Tape, Tensor, no_grad, pool3


def fd_check(f, params, tol=1e-6, h=1e-5):
    report = grad_check(f, params, h=h)
    assert report.passed(tol), report.summary()


# ---------------------------------------------------------------------------
# forward oracles


def test_matmul_hand_value():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0], [6.0]])
    out = T.matmul(a, b)
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_error():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_hand_value():
    out = T.softmax(Tensor([math.log(2.0), 0.0]))
    np.testing.assert_allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], rtol=1e-15)


def test_softmax_extreme_logits_no_overflow():
    out = T.softmax(Tensor([1000.0, 0.0]))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-300)
    assert np.all(np.isfinite(out.data))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = T.softmax(Tensor(rng.normal(size=(4, 7, 5))), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones((4, 7)), rtol=1e-12)


def test_sigmoid_tanh_relu_values():
    np.testing.assert_allclose(T.sigmoid(Tensor([0.0])).data, [0.5])
    np.testing.assert_allclose(T.tanh(Tensor([0.0])).data, [0.0])
    assert np.array_equal(T.relu(Tensor([-2.0, 0.0, 3.0])).data, [0.0, 0.0, 3.0])
    # stable in both tails
    assert T.sigmoid(Tensor([-1000.0])).data[0] == 0.0
    assert T.sigmoid(Tensor([1000.0])).data[0] == 1.0


def test_gelu_exact_gaussian_cdf():
    # gelu(1) = 1 * Phi(1); Phi(1) = 0.8413447460685429 (standard normal CDF)
    out = T.gelu(Tensor([1.0]))
    np.testing.assert_allclose(out.data, [0.8413447460685429], rtol=1e-15)
    # not the tanh approximation, which gives 0.84119860...
    assert abs(out.data[0] - 0.8411986) > 1e-5


def test_activation_dispatch_unknown_kind():
    with pytest.raises(ValueError):
        T.activation("swish", Tensor([1.0]))


def test_layer_norm_hand_value():
    out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0], True), Tensor([0.0, 0.0], True))
    expected = 1.0 / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out.data, [[-expected, expected]], rtol=1e-15)


def test_layer_norm_gamma_zero_gives_beta():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    beta = np.array([1.0, -2.0, 3.0, 0.5])
    out = T.layer_norm(x, Tensor(np.zeros(4)), Tensor(beta))
    assert np.array_equal(out.data, np.tile(beta, (3, 1)))


def test_linear_hand_value():
    out = T.linear(Tensor([[2.0, 3.0]]), Tensor([[1.0, 1.0]]), Tensor([1.0]))
    assert np.array_equal(out.data, [[6.0]])


def test_concat_and_rows():
    a, b = Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])
    cat = T.concat(a, b, axis=0)
    assert np.array_equal(cat.data, [[1.0, 2.0], [3.0, 4.0]])
    picked = T.rows(cat, [1, 1, 0])
    assert np.array_equal(picked.data, [[3.0, 4.0], [3.0, 4.0], [1.0, 2.0]])


def test_finite_guard_raises():
    big = Tensor([1e308])
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        T.add(big, big)


# ---------------------------------------------------------------------------
# autodiff mechanics


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    tape = Tape()
    with tape:
        y = T.scale(x, 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_grad_accumulates_over_reuse():
    x = Tensor([2.0], requires_grad=True)
    tape = Tape()
    with tape:
        y = T.sum_all(T.mul(x, x))  # d/dx x^2 = 2x
    tape.backward(y)
    np.testing.assert_allclose(x.grad, [4.0])


def test_no_grad_suppresses_recording():
    x = Tensor([2.0], requires_grad=True)
    tape = Tape()
    with tape:
        with no_grad():
            y = T.mul(x, x)
    assert len(tape) == 0 and not y.requires_grad


def test_no_tape_means_no_graph():
    x = Tensor([2.0], requires_grad=True)
    y = T.mul(x, x)
    assert not y.requires_grad


def test_concat_gradient_splits():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 2)), requires_grad=True)
    tape = Tape()
    with tape:
        out = T.sum_all(T.scale(T.concat(a, b, axis=0), 3.0))
    tape.backward(out)
    assert np.array_equal(a.grad, np.full((2, 2), 3.0))
    assert np.array_equal(b.grad, np.full((1, 2), 3.0))


def test_rows_gradient_scatter_adds():
    x = Tensor(np.zeros((3, 2)), requires_grad=True)
    tape = Tape()
    with tape:
        out = T.sum_all(T.rows(x, [1, 1, 2]))
    tape.backward(out)
    assert np.array_equal(x.grad, [[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]])


# ---------------------------------------------------------------------------
# finite-difference gradient oracles (central differences)


def test_matmul_grad_fd():
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    c = rng.normal(size=(3, 2))
    fd_check(lambda: T.sum_all(T.mul_const(T.matmul(a, b), c)), [("a", a), ("b", b)])


def test_bmm_bmm_nt_grad_fd():
    rng = np.random.default_rng(8)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
    c = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    w1, w2 = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 5))
    fd_check(lambda: T.sum_all(T.mul_const(T.bmm(a, b), w1)), [("a", a), ("b", b)])
    fd_check(lambda: T.sum_all(T.mul_const(T.bmm_nt(a, c), w2)), [("a", a), ("c", c)])


def test_softmax_layer_norm_grad_fd():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    g = Tensor(rng.normal(size=5), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    w = rng.normal(size=(3, 5))
    fd_check(lambda: T.sum_all(T.mul_const(T.softmax(x), w)), [("x", x)])
    fd_check(lambda: T.sum_all(T.mul_const(T.layer_norm(x, g, b), w)),
             [("x", x), ("gamma", g), ("beta", b)])


def test_activations_grad_fd():
    rng = np.random.default_rng(10)
    x = Tensor(rng.normal(size=(4, 3)) * 2.0 + 0.1, requires_grad=True)
    w = rng.normal(size=(4, 3))
    for kind in ("sigmoid", "tanh", "gelu"):
        fd_check(lambda k=kind: T.sum_all(T.mul_const(T.activation(k, x), w)), [("x", x)])


def test_linear_bias_scale_grad_fd():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    m = rng.normal(size=(3, 2))
    fd_check(lambda: T.sum_all(T.mul_const(T.linear(x, w, b), m)),
             [("x", x), ("w", w), ("b", b)])


def test_reductions_and_scalar_ops_grad_fd():
    rng = np.random.default_rng(12)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    s = Tensor(np.asarray(0.7), requires_grad=True)

    def f():
        a = T.sum_axes(x, (1, 2))          # (2,)
        b = T.mean_axes(x, (0,))           # (3, 4)
        c = T.mul_scalar_tensor(b, s)
        return T.add(T.sum_all(c), T.sum_all(T.mul(a, a)))

    fd_check(f, [("x", x), ("s", s)])


def test_div_grad_fd():
    rng = np.random.default_rng(13)
    a = Tensor(rng.uniform(1.0, 2.0, size=(3,)), requires_grad=True)
    b = Tensor(rng.uniform(1.0, 2.0, size=(3,)), requires_grad=True)
    fd_check(lambda: T.sum_all(T.div(a, b)), [("a", a), ("b", b)])


def test_bce_map_grad_fd_and_value():
    # logit 0 -> ln 2 exactly, any target
    out = T.bce_with_logits_map(Tensor([[0.0]]), np.array([[1.0]]))
    np.testing.assert_allclose(out.data, [[math.log(2.0)]], rtol=1e-15)
    rng = np.random.default_rng(14)
    x = Tensor(rng.normal(size=(3, 4)) * 3.0, requires_grad=True)
    t = (rng.uniform(size=(3, 4)) > 0.5).astype(float)
    fd_check(lambda: T.mean_all(T.bce_with_logits_map(x, t)), [("x", x)])


def test_composed_graph_grad_fd():
    # full-graph FD vs analytic through a composed chain of ops
    rng = np.random.default_rng(15)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    g = Tensor(np.ones(5), requires_grad=True)
    be = Tensor(np.zeros(5), requires_grad=True)

    def f():
        h = T.gelu(T.linear(x, w, b))
        h = T.layer_norm(h, g, be)
        p = T.softmax(h, axis=-1)
        return T.mean_all(T.mul(p, h))

    fd_check(f, [("x", x), ("w", w), ("b", b), ("g", g), ("be", be)], tol=1e-5)


def test_gradcheck_detects_wrong_backward():
    # a deliberately broken backward rule must fail the harness
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def bad_square(t):
        d = t.data
        return T._out(d * d, (t,), lambda gr: (gr * d,), "bad_square")  # should be 2*d

    report = grad_check(lambda: T.sum_all(bad_square(x)), [("x", x)])
    assert not report.passed(1e-4)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_1x1_hand_value():
    x = Tensor(np.array([[[[1.0, 3.0]]]]))       # (1,1,1,2)
    w = Tensor(np.array([[[[2.0]]]]))            # (1,1,1,1)
    out = T.conv2d(x, w, Tensor([0.0]))
    assert np.array_equal(out.data, [[[[2.0, 6.0]]]])


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(16)
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = T.conv2d(x, Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, x.data, rtol=0, atol=0)


def test_conv2d_matches_naive_loop():
    rng = np.random.default_rng(17)
    x = rng.normal(size=(2, 3, 6, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for bi in range(2):
        for co in range(4):
            for i in range(6):
                for j in range(7):
                    ref[bi, co, i, j] = np.sum(xp[bi, :, i:i + 3, j:j + 3] * w[co]) + b[co]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_conv2d_stride2_shape_and_grad_fd():
    rng = np.random.default_rng(18)
    x = Tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)
    b = Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
    out = T.conv2d(x, w, b, stride=2)
    assert out.shape == (1, 3, 4, 4)
    m = rng.normal(size=(1, 3, 4, 4))
    fd_check(lambda: T.sum_all(T.mul_const(T.conv2d(x, w, b, stride=2), m)),
             [("x", x), ("w", w), ("b", b)], tol=1e-5)


def test_conv2d_grad_fd_stride1():
    rng = np.random.default_rng(19)
    x = Tensor(rng.normal(size=(2, 2, 4, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 3, 3)) * 0.3, requires_grad=True)
    b = Tensor(rng.normal(size=2) * 0.1, requires_grad=True)
    m = rng.normal(size=(2, 2, 4, 5))
    fd_check(lambda: T.sum_all(T.mul_const(T.conv2d(x, w, b), m)),
             [("x", x), ("w", w), ("b", b)], tol=1e-5)


def test_conv2d_rejects_even_kernel():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]))


# ---------------------------------------------------------------------------
# pool3 morphology (non-differentiable utility)


def test_pool3_single_pixel_dilation():
    x = np.zeros((5, 5))
    x[2, 2] = 1.0
    out = pool3("max", x)
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1.0
    assert np.array_equal(out, expected)


def test_pool3_edge_replication():
    x = np.zeros((4, 4))
    x[0, 0] = 1.0
    out = pool3("max", x)
    assert out[0, 0] == 1.0 and out[1, 1] == 1.0 and out[0, 1] == 1.0
    assert out[2, 2] == 0.0
    # min-pool of an all-ones map stays all ones under edge replication
    assert np.array_equal(pool3("min", np.ones((3, 3))), np.ones((3, 3)))


def test_pool3_minmax_duality_binary():
    rng = np.random.default_rng(20)
    for _ in range(25):
        x = (rng.uniform(size=(9, 11)) > 0.6).astype(float)
        np.testing.assert_array_equal(pool3("min", x), 1.0 - pool3("max", 1.0 - x))


def test_pool3_dilation_monotone_growth():
    rng = np.random.default_rng(21)
    for _ in range(25):
        x = (rng.uniform(size=(8, 8)) > 0.7).astype(float)
        once = pool3("max", x)
        twice = pool3("max", once)
        assert np.all(twice >= once)


def test_pool3_shape_preserving_and_kind_check():
    assert pool3("min", np.ones((6, 9))).shape == (6, 9)
    with pytest.raises(ValueError):
        pool3("avg", np.ones((3, 3)))
    with pytest.raises(ValueError):
        pool3("max", np.ones((3, 3, 3)))
