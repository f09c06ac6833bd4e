"""Tensor engine tests: every autodiff rule is checked against an
independent oracle (naive loops or central finite differences)."""

import math

import numpy as np
import pytest

from smak.errors import ConfigError, InputError, UsageError
from smak.tensor import (
    LossValue,
    Tape,
    Tensor,
    add,
    backward,
    bias_add,
    conv2d,
    dense,
    finite_diff_grad,
    flatten,
    max_pool2d,
    relu,
    scale,
    softmax_cross_entropy,
    sum_all,
)


def naive_matmul(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]))
    for i in range(x.shape[0]):
        for o in range(w.shape[1]):
            acc = 0.0
            for k in range(x.shape[1]):
                acc += x[i, k] * w[k, o]
            out[i, o] = acc + b[o]
    return out


def naive_conv(x, k, stride, pad):
    bsz, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((bsz, f, ho, wo))
    for b in range(bsz):
        for ff in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[
                        b, :, i * stride : i * stride + kh, j * stride : j * stride + kw
                    ]
                    out[b, ff, i, j] = (patch * k[ff]).sum()
    return out


def cross_entropy_oracle(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = row.max()
        total += -(row[y] - m - math.log(np.exp(row - m).sum()))
    return total / len(labels)


class TestDense:
    def test_identity_weights(self):
        out = dense(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_hand_sum(self):
        out = dense(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
        np.testing.assert_array_equal(out.data, [[6.0]])

    def test_matches_triple_loop_oracle(self):
        # BLAS may fuse multiply-adds, so allow a couple of ulps
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3))
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(4)
        got = dense(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.abs(got - naive_matmul(x, w, b)).max() < 1e-14

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.random((2, 3, 5, 5))
        k = np.zeros((3, 3, 1, 1))
        for c in range(3):
            k[c, c, 0, 0] = 1.0
        out = conv2d(Tensor(x), Tensor(k)).data
        np.testing.assert_allclose(out, x, atol=1e-15)

    def test_all_ones_3x3(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))).data
        np.testing.assert_array_equal(out, [[[[9.0]]]])

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_matches_six_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 9, 9))
        k = rng.standard_normal((4, 3, 3, 3))
        got = conv2d(Tensor(x), Tensor(k), stride, pad).data
        want = naive_conv(x, k, stride, pad)
        assert np.abs(got - want).max() < 1e-12

    def test_non_integral_output_rejected(self):
        with pytest.raises(ConfigError):
            conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2)


class TestPoolAndPieces:
    def test_relu(self):
        out = relu(Tensor([[-1.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 2.0]])

    def test_max_pool_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out = max_pool2d(Tensor(x), 2).data
        np.testing.assert_array_equal(out, [[[[5.0, 7.0], [13.0, 15.0]]]])

    def test_max_pool_tie_routes_to_first(self):
        # all-equal window: the gradient must land on the row-major first cell
        x = Tensor(np.ones((1, 1, 2, 2)))
        tape = Tape()
        out = max_pool2d(x, 2, tape=tape)
        loss = sum_all(out, tape)
        g = backward(tape, loss)[x]
        np.testing.assert_array_equal(g, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_flatten_round_trip(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 2, 2))
        assert flatten(x).shape == (2, 12)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((3, 10))), np.zeros(3, dtype=int))
        assert abs(loss.scalar - math.log(10)) < 1e-12

    def test_margin_limit(self):
        logits = np.zeros((1, 4))
        prev = None
        for margin in (5.0, 20.0, 80.0):
            logits[0, 2] = margin
            cur = softmax_cross_entropy(Tensor(logits), [2]).scalar
            if prev is not None:
                assert cur < prev
            prev = cur
        assert prev < 1e-12

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((6, 9)) * 10
        labels = rng.integers(0, 9, 6)
        got = softmax_cross_entropy(Tensor(logits), labels).scalar
        assert abs(got - cross_entropy_oracle(logits, labels)) < 1e-12

    def test_nonnegative_and_stable(self):
        # large logits must not overflow thanks to max subtraction
        logits = Tensor(np.array([[1e4, -1e4, 0.0]]))
        loss = softmax_cross_entropy(logits, [0])
        assert loss.scalar >= 0.0 and np.isfinite(loss.scalar)

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


def small_cnn(rng, f1=3, f2=4, classes=4):
    return {
        "k1": Tensor(rng.standard_normal((f1, 1, 3, 3)) * 0.5),
        "b1": Tensor(rng.standard_normal(f1) * 0.1),
        "k2": Tensor(rng.standard_normal((f2, f1, 3, 3)) * 0.4),
        "b2": Tensor(rng.standard_normal(f2) * 0.1),
        "w": Tensor(rng.standard_normal((f2 * 3 * 3, classes)) * 0.3),
        "b": Tensor(rng.standard_normal(classes) * 0.1),
    }


def cnn_forward(p, x, tape=None):
    h = conv2d(x, p["k1"], 1, 1, tape)
    h = bias_add(h, p["b1"], tape)
    h = relu(h, tape)
    h = max_pool2d(h, 2, tape=tape)
    h = conv2d(h, p["k2"], 1, 1, tape)
    h = bias_add(h, p["b2"], tape)
    h = relu(h, tape)
    h = max_pool2d(h, 2, tape=tape)
    h = flatten(h, tape)
    return dense(h, p["w"], p["b"], tape)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        x = Tensor(np.arange(6.0).reshape(2, 3))
        loss = sum_all(x, tape)
        g = backward(tape, loss)[x]
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_linear_model_gradient_is_w(self):
        rng = np.random.default_rng(4)
        w = rng.standard_normal((5, 1))
        tape = Tape()
        x = Tensor(rng.standard_normal((1, 5)))
        out = dense(x, Tensor(w), Tensor(np.zeros(1)), tape)
        loss = sum_all(out, tape)
        g = backward(tape, loss)[x]
        np.testing.assert_array_equal(g, w.T)

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = Tensor(np.ones((2, 2)))
        out = relu(x, tape)
        with pytest.raises(UsageError):
            backward(tape, out)

    def test_unrecorded_loss_rejected(self):
        tape = Tape()
        relu(Tensor(np.ones(2)), tape)
        with pytest.raises(UsageError):
            backward(tape, Tensor(1.0))

    @pytest.mark.parametrize("seed", range(5))
    def test_cnn_input_gradient_vs_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        p = small_cnn(rng)
        x0 = rng.random((1, 1, 12, 12))
        y = np.array([seed % 4])

        tape = Tape()
        xt = Tensor(x0)
        loss = softmax_cross_entropy(cnn_forward(p, xt, tape), y, tape)
        auto = backward(tape, loss)[xt]

        fd = finite_diff_grad(
            lambda t: softmax_cross_entropy(cnn_forward(p, t), y).scalar,
            Tensor(x0.copy()),
            1e-5,
        ).data
        rel = np.abs(auto - fd) / (np.abs(fd) + 1e-8)
        assert rel.max() < 1e-4

    def test_cnn_parameter_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(42)
        p = small_cnn(rng)
        x0 = rng.random((2, 1, 12, 12))
        y = np.array([0, 2])

        tape = Tape()
        xt = Tensor(x0)
        loss = softmax_cross_entropy(cnn_forward(p, xt, tape), y, tape)
        grads = backward(tape, loss)

        for name in ("k1", "b2", "w"):
            def f(t, name=name):
                q = dict(p)
                q[name] = t
                return softmax_cross_entropy(cnn_forward(q, Tensor(x0)), y).scalar

            fd = finite_diff_grad(f, p[name].copy(), 1e-5).data
            rel = np.abs(grads[p[name]] - fd) / (np.abs(fd) + 1e-8)
            assert rel.max() < 1e-4, name

    def test_linearity_on_shared_tape(self):
        # grad of a*f + b*g == a*grad(f) + b*grad(g), all on one tape
        rng = np.random.default_rng(7)
        p = small_cnn(rng)
        x0 = rng.random((1, 1, 12, 12))
        a, b = 2.5, -1.25

        def run(combine):
            tape = Tape()
            xt = Tensor(x0)
            logits = cnn_forward(p, xt, tape)
            f = softmax_cross_entropy(logits, [0], tape).value
            g = sum_all(logits, tape)
            if combine:
                loss = add(scale(f, a, tape), scale(g, b, tape), tape)
                return backward(tape, loss)[xt]
            gf = backward(tape, f)[xt]
            gg = backward(tape, g)[xt]
            return a * gf + b * gg

        np.testing.assert_allclose(run(True), run(False), atol=1e-12, rtol=0)

    def test_deterministic_bitwise(self):
        rng = np.random.default_rng(9)
        p = small_cnn(rng)
        x0 = rng.random((2, 1, 12, 12))

        def grad_once():
            tape = Tape()
            xt = Tensor(x0)
            loss = softmax_cross_entropy(cnn_forward(p, xt, tape), [1, 3], tape)
            return backward(tape, loss)[xt]

        np.testing.assert_array_equal(grad_once(), grad_once())

    def test_wrt_restriction_matches_full_map(self):
        rng = np.random.default_rng(10)
        p = small_cnn(rng)
        x0 = rng.random((1, 1, 12, 12))
        tape = Tape()
        xt = Tensor(x0)
        loss = softmax_cross_entropy(cnn_forward(p, xt, tape), [2], tape)
        tape2 = Tape()
        xt2 = Tensor(x0)
        loss2 = softmax_cross_entropy(cnn_forward(p, xt2, tape2), [2], tape2)
        full = backward(tape, loss)[xt]
        only = backward(tape2, loss2, wrt={xt2})[xt2]
        np.testing.assert_array_equal(full, only)

    def test_all_values_finite_after_ops(self):
        rng = np.random.default_rng(12)
        p = small_cnn(rng)
        tape = Tape()
        xt = Tensor(rng.random((3, 1, 12, 12)))
        loss = softmax_cross_entropy(cnn_forward(p, xt, tape), [0, 1, 2], tape)
        grads = backward(tape, loss)
        assert np.isfinite(loss.scalar)
        for g in grads.values():
            assert np.isfinite(g).all()


class TestFiniteDiff:
    def test_sum_of_squares(self):
        g = finite_diff_grad(lambda t: float((t.data ** 2).sum()), Tensor([1.0, 2.0]), 1e-5)
        np.testing.assert_allclose(g.data, [2.0, 4.0], atol=1e-8)

    def test_constant_function(self):
        g = finite_diff_grad(lambda t: 3.0, Tensor(np.ones((2, 2))), 1e-5)
        np.testing.assert_array_equal(g.data, np.zeros((2, 2)))

    def test_rejects_bad_step(self):
        with pytest.raises(ConfigError):
            finite_diff_grad(lambda t: 0.0, Tensor([1.0]), 0.0)


def test_loss_value_fields():
    lv = softmax_cross_entropy(Tensor(np.zeros((1, 2))), [0])
    assert isinstance(lv, LossValue)
    assert lv.kind == "cross_entropy"
    assert lv.scalar >= 0.0


def test_tensor_row_major_invariant():
    t = Tensor(np.asfortranarray(np.arange(6.0).reshape(2, 3)))
    assert t.data.flags["C_CONTIGUOUS"]
    assert int(np.prod(t.shape)) == t.size
