"""Tape and operation tests.

Forward values are checked against plain numpy expressions computed
outside the tape; gradients against central finite differences through
the scalar-loss helper from :mod:`tmatch.checks`. The broader randomized
gradient sweep lives in ``tmatch check --suite grads``; here each op
gets a small deterministic case plus the edge cases the sweep cannot
target (broadcasting, shared subexpressions, eval-mode BN).
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import tmatch.autodiff as ad


def _tensor(rng, shape, requires_grad=True, scale=1.0):
    return ad.Tensor(rng.normal(size=shape) * scale, requires_grad=requires_grad)


def _numeric_grad(fn, tensors, step=1e-6):
    """Central differences of a scalar-valued rebuild function."""
    grads = []
    for i, t in enumerate(tensors):
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + step
            up = fn().data.item()
            flat[j] = keep - step
            down = fn().data.item()
            flat[j] = keep
            gf[j] = (up - down) / (2 * step)
        grads.append(g)
    return grads


class TestTensor:
    def test_data_coerced_to_float64(self):
        t = ad.Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert t.data.dtype == np.float64
        assert t.shape == (2, 3)

    def test_grad_starts_empty(self):
        t = ad.Tensor(np.ones(3))
        assert t.grad is None

    def test_leaf_without_grad_excluded(self):
        a = ad.Tensor(np.ones(3), requires_grad=True)
        b = ad.Tensor(np.ones(3), requires_grad=False)
        out = ad.tensor_sum(ad.add(a, b))
        ad.backward(out)
        assert a.grad is not None
        assert b.grad is None


class TestElementwise:
    def test_add_broadcast_forward_and_grad(self):
        rng = np.random.default_rng(0)
        a = _tensor(rng, (2, 3, 4))
        b = _tensor(rng, (3, 1))
        out = ad.add(a, b)
        np.testing.assert_array_equal(out.data, a.data + b.data)
        ad.backward(ad.tensor_sum(out))
        np.testing.assert_allclose(a.grad, np.ones((2, 3, 4)))
        np.testing.assert_allclose(b.grad, np.full((3, 1), 8.0))

    def test_mul_grad_matches_numeric(self):
        rng = np.random.default_rng(1)
        a = _tensor(rng, (3, 2))
        b = _tensor(rng, (3, 2))

        def fn():
            return ad.tensor_sum(ad.mul(ad.mul(a, b), a))

        out = fn()
        ad.backward(out)
        num = _numeric_grad(fn, [a, b])
        np.testing.assert_allclose(a.grad, num[0], atol=1e-7)
        np.testing.assert_allclose(b.grad, num[1], atol=1e-7)

    def test_shared_subexpression_accumulates(self):
        a = ad.Tensor(np.array([2.0]), requires_grad=True)
        out = ad.add(a, a)
        ad.backward(ad.tensor_sum(out))
        np.testing.assert_allclose(a.grad, [2.0])

    def test_relu_zeroes_negative_gradient(self):
        a = ad.Tensor(np.array([-1.0, 0.5, 3.0]), requires_grad=True)
        out = ad.relu(a)
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 3.0])
        ad.backward(ad.tensor_sum(out))
        np.testing.assert_array_equal(a.grad, [0.0, 1.0, 1.0])

    def test_scalar_mul(self):
        a = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        out = ad.scalar_mul(a, -3.0)
        np.testing.assert_array_equal(out.data, [-3.0, 6.0])
        ad.backward(ad.tensor_sum(out))
        np.testing.assert_array_equal(a.grad, [-3.0, -3.0])


class TestShapeOps:
    def test_concat_splits_gradient(self):
        rng = np.random.default_rng(2)
        a = _tensor(rng, (2, 3))
        b = _tensor(rng, (2, 1))
        out = ad.concat([a, b], axis=1)
        assert out.shape == (2, 4)
        weights = np.arange(8.0).reshape(2, 4)
        ad.backward(ad.tensor_sum(ad.mul(out, ad.Tensor(weights))))
        np.testing.assert_array_equal(a.grad, weights[:, :3])
        np.testing.assert_array_equal(b.grad, weights[:, 3:])

    def test_reshape_transpose_round_trip_gradient(self):
        rng = np.random.default_rng(3)
        a = _tensor(rng, (2, 3, 4))
        out = ad.transpose(ad.reshape(a, (6, 4)), (1, 0))
        assert out.shape == (4, 6)
        weights = rng.normal(size=(4, 6))
        ad.backward(ad.tensor_sum(ad.mul(out, ad.Tensor(weights))))
        np.testing.assert_array_equal(a.grad, weights.T.reshape(2, 3, 4))

    def test_matmul_grads(self):
        rng = np.random.default_rng(4)
        a = _tensor(rng, (3, 5))
        b = _tensor(rng, (5, 2))
        out = ad.matmul(a, b)
        np.testing.assert_allclose(out.data, a.data @ b.data)
        g = rng.normal(size=(3, 2))
        ad.backward(ad.tensor_sum(ad.mul(out, ad.Tensor(g))))
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestReductions:
    def test_sum_axis_keepdims(self):
        rng = np.random.default_rng(5)
        a = _tensor(rng, (2, 3, 4))
        out = ad.tensor_sum(a, axis=(0, 2), keepdims=True)
        np.testing.assert_allclose(out.data, a.data.sum(axis=(0, 2), keepdims=True))
        ad.backward(ad.tensor_sum(out))
        np.testing.assert_array_equal(a.grad, np.ones((2, 3, 4)))

    def test_mean_axis_tuple(self):
        rng = np.random.default_rng(6)
        a = _tensor(rng, (2, 3, 4))
        out = ad.tensor_mean(a, axis=(1, 2))
        np.testing.assert_allclose(out.data, a.data.mean(axis=(1, 2)))
        ad.backward(ad.tensor_sum(out))
        np.testing.assert_allclose(a.grad, np.full((2, 3, 4), 1.0 / 12.0))

    def test_mean_full(self):
        a = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = ad.tensor_mean(a)
        assert out.data.item() == pytest.approx(2.5)
        ad.backward(out)
        np.testing.assert_allclose(a.grad, np.full((2, 3), 1.0 / 6.0))


class TestSoftmaxCrossEntropy:
    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        a = _tensor(rng, (4, 6), scale=5.0)
        out = ad.softmax(a)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 5))
        a = ad.softmax(ad.Tensor(x))
        b = ad.softmax(ad.Tensor(x + 100.0))
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_cross_entropy_matches_log_softmax(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=(5, 4)) * 3
        labels = np.array([0, 3, 1, 2, 2])
        t = ad.Tensor(logits, requires_grad=True)
        loss = ad.cross_entropy(t, labels)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expect = -logp[np.arange(5), labels].mean()
        assert loss.data.item() == pytest.approx(expect, abs=1e-12)

    def test_cross_entropy_grad_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(10)
        logits = rng.normal(size=(4, 3))
        labels = np.array([2, 0, 1, 1])
        t = ad.Tensor(logits, requires_grad=True)
        ad.backward(ad.cross_entropy(t, labels))
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        onehot = np.eye(3)[labels]
        np.testing.assert_allclose(t.grad, (p - onehot) / 4.0, atol=1e-12)

    def test_cross_entropy_reductions_consistent(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=(6, 5))
        labels = rng.integers(0, 5, size=6)
        t = ad.Tensor(logits)
        per = ad.cross_entropy(t, labels, reduction="none")
        total = ad.cross_entropy(t, labels, reduction="sum")
        mean = ad.cross_entropy(t, labels, reduction="mean")
        assert per.shape == (6,)
        assert total.data.item() == pytest.approx(per.data.sum(), abs=1e-12)
        assert mean.data.item() == pytest.approx(per.data.mean(), abs=1e-12)

    def test_cross_entropy_rejects_bad_labels(self):
        t = ad.Tensor(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            ad.cross_entropy(t, np.array([0, 3]))


class TestConv2d:
    def test_single_pixel_valid_is_dot_product(self):
        rng = np.random.default_rng(12)
        x = _tensor(rng, (1, 3, 4, 4))
        k = _tensor(rng, (2, 3, 4, 4))
        out = ad.conv2d(x, k, padding="valid")
        assert out.shape == (1, 2, 1, 1)
        expect = (x.data[0, None] * k.data).sum(axis=(1, 2, 3))
        np.testing.assert_allclose(out.data[0, :, 0, 0], expect, atol=1e-12)

    def test_identity_kernel_same_padding(self):
        rng = np.random.default_rng(13)
        x = _tensor(rng, (2, 3, 5, 5))
        k = np.zeros((3, 3, 3, 3))
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        out = ad.conv2d(x, ad.Tensor(k), padding="same")
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_stride_two_shapes(self):
        rng = np.random.default_rng(14)
        x = _tensor(rng, (1, 2, 8, 8))
        k = _tensor(rng, (4, 2, 3, 3))
        out = ad.conv2d(x, k, stride=2, padding="same")
        assert out.shape == (1, 4, 4, 4)

    def test_bias_adds_per_channel(self):
        rng = np.random.default_rng(15)
        x = _tensor(rng, (1, 2, 3, 3))
        k = _tensor(rng, (2, 2, 1, 1))
        b = ad.Tensor(np.array([10.0, -10.0]), requires_grad=True)
        with_bias = ad.conv2d(x, k, bias=b)
        without = ad.conv2d(x, k)
        np.testing.assert_allclose(
            with_bias.data - without.data,
            np.array([10.0, -10.0])[None, :, None, None] * np.ones((1, 2, 3, 3)))
        ad.backward(ad.tensor_sum(with_bias))
        np.testing.assert_allclose(b.grad, [9.0, 9.0])

    def test_grad_matches_numeric(self):
        rng = np.random.default_rng(16)
        x = _tensor(rng, (2, 2, 4, 4))
        k = _tensor(rng, (3, 2, 3, 3))

        def fn():
            out = ad.conv2d(x, k, stride=2, padding="same")
            return ad.tensor_sum(ad.mul(out, out))

        ad.backward(fn())
        num = _numeric_grad(fn, [x, k])
        np.testing.assert_allclose(x.grad, num[0], atol=1e-5)
        np.testing.assert_allclose(k.grad, num[1], atol=1e-5)


class TestAvgPool:
    def test_count_valid_corners(self):
        x = ad.Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
        out = ad.avg_pool(x, (3, 3), border="count_valid")
        # averaging ones over any valid window stays exactly one
        np.testing.assert_allclose(out.data, 1.0)

    def test_zero_pad_corners_shrink(self):
        x = ad.Tensor(np.ones((1, 1, 4, 4)))
        out = ad.avg_pool(x, (3, 3), border="zero_pad")
        assert out.data[0, 0, 0, 0] == pytest.approx(4.0 / 9.0)
        assert out.data[0, 0, 1, 1] == pytest.approx(1.0)

    def test_global_valid_pool(self):
        rng = np.random.default_rng(17)
        x = _tensor(rng, (2, 3, 5, 5))
        out = ad.avg_pool(x, (5, 5), padding="valid")
        assert out.shape == (2, 3, 1, 1)
        np.testing.assert_allclose(out.data[:, :, 0, 0], x.data.mean(axis=(2, 3)))

    def test_grad_matches_numeric(self):
        rng = np.random.default_rng(18)
        x = _tensor(rng, (1, 2, 4, 4))

        def fn():
            out = ad.avg_pool(x, (2, 2), stride=2, border="count_valid")
            return ad.tensor_sum(ad.mul(out, out))

        ad.backward(fn())
        num = _numeric_grad(fn, [x])
        np.testing.assert_allclose(x.grad, num[0], atol=1e-6)


class TestBatchNorm:
    def test_train_mode_normalizes_batch(self):
        rng = np.random.default_rng(19)
        x = _tensor(rng, (8, 3, 4, 4), scale=5.0)
        state = ad.BatchNormState(3)
        state.mode = "train"
        out = ad.batch_norm(x, state)
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        np.testing.assert_allclose(mean, 0.0, atol=1e-10)
        np.testing.assert_allclose(var, 1.0, atol=1e-3)

    def test_running_stats_track_batches(self):
        rng = np.random.default_rng(20)
        state = ad.BatchNormState(2)
        state.mode = "train"
        x = _tensor(rng, (16, 2, 3, 3))
        ad.batch_norm(x, state)
        assert state.running_mean is not None
        first_mean = state.running_mean.copy()
        ad.batch_norm(_tensor(rng, (16, 2, 3, 3)), state)
        assert not np.array_equal(state.running_mean, first_mean)

    def test_eval_uses_running_stats(self):
        rng = np.random.default_rng(21)
        state = ad.BatchNormState(2)
        state.mode = "train"
        for _ in range(50):
            ad.batch_norm(_tensor(rng, (32, 2, 3, 3)), state)
        state.mode = "eval"
        x = _tensor(rng, (4, 2, 3, 3))
        out = ad.batch_norm(x, state)
        std = np.sqrt(state.running_var + state.epsilon_num)
        expect = (x.data - state.running_mean[None, :, None, None]) / \
            std[None, :, None, None]
        expect = expect * state.gamma.data[None, :, None, None] + \
            state.beta.data[None, :, None, None]
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_eval_before_any_batch_rejected(self):
        state = ad.BatchNormState(2)
        state.mode = "eval"
        with pytest.raises(ValueError):
            ad.batch_norm(ad.Tensor(np.zeros((1, 2, 2, 2))), state)


class TestBackward:
    def test_requires_scalar(self):
        t = ad.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(ad.relu(t))

    def test_deep_chain_no_recursion_limit(self):
        t = ad.Tensor(np.array([1.0]), requires_grad=True)
        out = t
        for _ in range(5000):
            out = ad.scalar_mul(out, 1.0)
        ad.backward(ad.tensor_sum(out))
        np.testing.assert_allclose(t.grad, [1.0])

    def test_second_backward_does_not_accumulate_into_first(self):
        t = ad.Tensor(np.array([3.0]), requires_grad=True)
        out = ad.tensor_sum(ad.mul(t, t))
        ad.backward(out)
        first = t.grad.copy()
        t.grad = None
        ad.backward(out)
        np.testing.assert_array_equal(t.grad, first)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=1, max_value=4),
       st.integers(min_value=1, max_value=6),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_softmax_is_probability_vector(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = ad.Tensor(rng.normal(size=(rows, cols)) * 10)
    p = ad.softmax(x).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=2, max_value=5),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_sum_of_parts_equals_whole(parts, seed):
    rng = np.random.default_rng(seed)
    tensors = [ad.Tensor(rng.normal(size=(2, 3))) for _ in range(parts)]
    whole = ad.tensor_sum(ad.concat(tensors, axis=0))
    by_parts = sum(t.data.sum() for t in tensors)
    assert whole.data.item() == pytest.approx(by_parts, rel=1e-12)
