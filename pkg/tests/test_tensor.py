"""Tensor kernel tests: forward values against independent oracles, every
backward rule against central finite differences."""

import numpy as np
import pytest

from i2ilab.rng import Rng
from i2ilab.gradcheck import grad_check
from i2ilab.tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    concat,
    cross_entropy,
    embedding,
    layernorm,
    matmul,
    mse,
    mul,
    relu,
    reshape,
    softmax,
    swap_axes,
    tsum,
    transpose,
)


def triple_loop_matmul(a, b):
    """Naive reference product, independent of numpy's matmul."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, b).data, b.data)

    def test_projector(self):
        p = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(matmul(p, b).data, [[5.0, 6.0], [0.0, 0.0]])

    def test_random_against_triple_loop(self):
        rng = Rng(7)
        a = rng.normal((3, 4))
        b = rng.normal((4, 2))
        got = matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, triple_loop_matmul(a, b), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched_matches_per_slice(self):
        rng = Rng(8)
        a = rng.normal((2, 3, 4))
        b = rng.normal((2, 4, 5))
        got = matmul(Tensor(a), Tensor(b)).data
        for i in range(2):
            np.testing.assert_allclose(got[i], triple_loop_matmul(a[i], b[i]),
                                       rtol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]), axis=0).data
        np.testing.assert_allclose(out, np.full(3, 1.0 / 3.0), rtol=0, atol=1e-15)

    def test_no_overflow(self):
        out = softmax(Tensor([1000.0, 0.0]), axis=0).data
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_against_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(softmax(Tensor(x), axis=0).data, expected,
                                   rtol=1e-14)

    def test_rows_sum_to_one(self):
        rng = Rng(3)
        x = rng.normal((5, 9)) * 30.0
        out = softmax(Tensor(x), axis=-1).data
        assert out.min() >= 0.0
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(5), atol=1e-12)

    def test_bad_axis(self):
        with pytest.raises(ValueError):
            softmax(Tensor(np.zeros((2, 2))), axis=5)


class TestLayernorm:
    def _gb(self, d):
        return Tensor(np.ones(d)), Tensor(np.zeros(d))

    def test_constant_row_is_zeros(self):
        g, b = self._gb(4)
        out = layernorm(Tensor(np.full((1, 4), 3.7)), g, b).data
        np.testing.assert_allclose(out, np.zeros((1, 4)), atol=1e-6)

    def test_already_normalized(self):
        g, b = self._gb(2)
        out = layernorm(Tensor([[1.0, -1.0]]), g, b, eps=1e-300).data
        np.testing.assert_allclose(out, [[1.0, -1.0]], rtol=1e-12)

    def test_moments(self):
        rng = Rng(11)
        x = rng.normal((3, 16)) * 4.0 + 2.0
        g, b = self._gb(16)
        out = layernorm(Tensor(x), g, b, eps=1e-12).data
        assert np.all(np.abs(out.mean(axis=-1)) < 1e-12)
        assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-9)

    def test_affine_shape_check(self):
        with pytest.raises(ValueError):
            layernorm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)),
                      Tensor(np.zeros(3)))


def logsumexp_gather_ce(logits, targets, ignore=-100):
    """Per-position log-sum-exp oracle for the cross-entropy op."""
    total, count = 0.0, 0
    for row, t in zip(logits, targets):
        if t == ignore:
            continue
        lse = np.log(np.sum(np.exp(row - row.max()))) + row.max()
        total += lse - row[t]
        count += 1
    return total / count


class TestCrossEntropy:
    def test_confident_limit(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 60.0
        loss = cross_entropy(Tensor(logits), np.array([2])).item()
        assert loss < 1e-12

    def test_uniform_is_log_v(self):
        loss = cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3])).item()
        np.testing.assert_allclose(loss, np.log(4.0), rtol=1e-14)

    def test_against_logsumexp_oracle(self):
        rng = Rng(5)
        logits = rng.normal((5, 7)) * 3.0
        targets = np.array([0, 6, -100, 3, 2])
        got = cross_entropy(Tensor(logits), targets).item()
        np.testing.assert_allclose(got, logsumexp_gather_ce(logits, targets),
                                   rtol=1e-12)

    def test_all_ignored(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([-100, -100]))


class TestMse:
    def test_identity(self):
        a = Tensor([1.0, 2.0, 3.0])
        assert mse(a, Tensor([1.0, 2.0, 3.0])).item() == 0.0

    def test_analytic(self):
        assert mse(Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).item() == 1.0

    def test_against_loop_oracle(self):
        rng = Rng(21)
        a, b = rng.normal((4, 3)), rng.normal((4, 3))
        acc = sum((a[i, j] - b[i, j]) ** 2 for i in range(4) for j in range(3))
        np.testing.assert_allclose(mse(Tensor(a), Tensor(b)).item(), acc / 12,
                                   rtol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape():
            loss = tsum(x)
            backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_mse_analytic_derivative(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape():
            backward(mse(x, Tensor([0.0])))
        np.testing.assert_allclose(x.grad, [4.0])

    def test_two_layer_network_finite_differences(self):
        rng = Rng(13)
        w1 = Tensor(rng.normal((4, 5)), requires_grad=True)
        w2 = Tensor(rng.normal((5, 2)), requires_grad=True)
        x = Tensor(rng.normal((3, 4)))
        y = Tensor(rng.normal((3, 2)))

        def loss():
            return mse(matmul(relu(matmul(x, w1)), w2), y)

        assert grad_check(loss, [w1, w2], eps=1e-5) < 1e-4

    def test_non_scalar_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with Tape():
            out = relu(x)
        with pytest.raises(ValueError):
            backward(out)

    def test_double_backward_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            loss = tsum(relu(x))
            backward(loss)
            with pytest.raises(RuntimeError):
                backward(loss)

    def test_no_tape_means_no_recording(self):
        x = Tensor([1.0], requires_grad=True)
        out = relu(x)
        assert not out.requires_grad
        with pytest.raises(RuntimeError):
            backward(tsum(out))

    def test_unused_branch_is_skipped(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            _side = softmax(x, axis=0)
            loss = tsum(relu(x))
            backward(loss)
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])


class TestPrimitiveGradients:
    """Module invariant: every primitive's analytic gradient matches central
    differences (eps 1e-5) below 1e-4 relative error."""

    def test_suite(self):
        rng = Rng(101)
        x = Tensor(rng.normal((3, 4)) + 0.3, requires_grad=True)
        w = Tensor(rng.normal((4, 4)), requires_grad=True)
        gain = Tensor(1.0 + rng.normal(4, std=0.1), requires_grad=True)
        bias = Tensor(rng.normal(4, std=0.1), requires_grad=True)
        table = Tensor(rng.normal((5, 4)), requires_grad=True)
        ids = np.array([0, 4, 2])
        targets = np.array([1, 3, 0])
        y = Tensor(rng.normal((3, 4)))

        cases = {
            "matmul": (lambda: tsum(mul(matmul(x, w), y)), [x, w]),
            "softmax": (lambda: tsum(mul(softmax(x, axis=-1), y)), [x]),
            "layernorm": (lambda: tsum(mul(layernorm(x, gain, bias), y)),
                          [x, gain, bias]),
            "cross_entropy": (lambda: cross_entropy(matmul(x, w), targets),
                              [x, w]),
            "mse": (lambda: mse(x, y), [x]),
            "relu": (lambda: tsum(mul(relu(x), y)), [x]),
            "embedding": (lambda: tsum(mul(embedding(table, ids), y)), [table]),
            "concat": (lambda: tsum(mul(concat([x, x], axis=1),
                                        concat([y, y], axis=1))), [x]),
            "transpose": (lambda: tsum(mul(transpose(x), transpose(y))), [x]),
            "reshape": (lambda: tsum(mul(reshape(x, (2, 6)),
                                         reshape(y, (2, 6)))), [x]),
            "sum_axis": (lambda: tsum(mul(tsum(x, axis=0, keepdims=True),
                                          tsum(y, axis=0, keepdims=True))), [x]),
        }
        for name, (f, params) in cases.items():
            err = grad_check(f, params, eps=1e-5)
            assert err < 1e-4, f"{name}: rel err {err}"

    def test_batched_matmul_and_swap_axes(self):
        rng = Rng(102)
        a = Tensor(rng.normal((2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal((2, 4, 3)), requires_grad=True)
        w = Tensor(rng.normal((2, 3)), requires_grad=True)

        def f():
            prod = matmul(a, b)                      # (2,3,3)
            flat = reshape(swap_axes(prod, 0, 1), (9, 2))
            return tsum(matmul(flat, w))

        assert grad_check(f, [a, b, w], eps=1e-5) < 1e-4


class TestDeterminismAndFiniteness:
    def test_bit_identical_repeat(self):
        def run():
            rng = Rng(99)
            x = Tensor(rng.normal((4, 4)), requires_grad=True)
            w = Tensor(rng.normal((4, 4)), requires_grad=True)
            with Tape():
                loss = mse(relu(matmul(x, w)), Tensor(np.zeros((4, 4))))
                backward(loss)
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)

    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan, 1.0])

    def test_overflow_detected(self):
        big = Tensor(np.full(3, 1e200))
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            mul(big, big)
