"""Engine tests: forward oracles plus finite-difference gradient checks."""

import threading

import numpy as np
import pytest

from jsfusion import tensor as T
from jsfusion.errors import ConfigError, ShapeError, UsageError


def numeric_grad(f, params, eps=1e-6):
    return T.finite_diff_grad(f, params, eps=eps)


def check_grads(build_loss, params, eps=1e-6, rtol=1e-6, atol=1e-8):
    """Compare tape gradients of a scalar loss against central differences."""
    for p in params:
        p.zero_grad()
    with T.Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def f():
        return build_loss().item()

    numeric = numeric_grad(f, params, eps=eps)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


class TestTensorBasics:
    def test_data_is_float64(self):
        t = T.Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2)

    def test_item_requires_single_element(self):
        with pytest.raises(UsageError):
            T.Tensor([1.0, 2.0]).item()

    def test_no_tape_means_no_grad_tracking(self):
        a = T.Tensor([1.0, 2.0], requires_grad=True)
        out = T.scale(a, 2.0)
        assert not out.requires_grad

    def test_seeded_rng_is_bitwise_reproducible(self):
        a = T.Rng(123).normal((4, 5))
        b = T.Rng(123).normal((4, 5))
        assert np.array_equal(a, b)

    def test_rng_spawn_streams_are_distinct_and_stable(self):
        root = T.Rng(7)
        c1 = root.spawn(1).normal((3,))
        c2 = root.spawn(2).normal((3,))
        again = T.Rng(7).spawn(1).normal((3,))
        assert np.array_equal(c1, again)
        assert not np.array_equal(c1, c2)


class TestMatmul:
    def test_identity(self):
        a = T.Tensor(np.arange(6, dtype=float).reshape(2, 3))
        eye = T.Tensor(np.eye(3))
        np.testing.assert_array_equal(T.matmul(a, eye).data, a.data)

    def test_known_product(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = T.Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[3.0], [7.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        check_grads(lambda: T.sum_all(T.tanh(T.matmul(a, b))), [a, b])


class TestElementwise:
    def test_add_shape_strictness(self):
        with pytest.raises(ShapeError):
            T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((3, 2))))

    def test_sigmoid_at_zero(self):
        assert T.sigmoid(T.Tensor(0.0)).item() == pytest.approx(0.5)

    def test_sigmoid_extremes_are_finite(self):
        y = T.sigmoid(T.Tensor([-1e4, 1e4])).data
        assert np.all(np.isfinite(y))
        assert y[0] == pytest.approx(0.0, abs=1e-12)
        assert y[1] == pytest.approx(1.0, abs=1e-12)

    def test_square_gradient_matches_known_derivative(self):
        # d/dx sum(x*x) at x=3 is 6
        x = T.Tensor([3.0], requires_grad=True)
        (g,) = T.finite_diff_grad(lambda: T.sum_all(T.hadamard(x, x)).item(), [x])
        assert g[0] == pytest.approx(6.0, rel=1e-6)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        a = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)

        check_grads(lambda: T.sum_all(T.hadamard(T.sigmoid(a), T.tanh(b))), [a, b])
        check_grads(lambda: T.sum_all(T.scale(T.add(a, b), -1.7)), [a, b])
        check_grads(lambda: T.sum_all(T.exp(T.scale(a, 0.3))), [a])

    def test_relu_gradient_away_from_kink(self):
        a = T.Tensor([[-1.0, 2.0, -0.5, 3.0]], requires_grad=True)
        check_grads(lambda: T.sum_all(T.relu(a)), [a])

    def test_log_requires_positive(self):
        with pytest.raises(UsageError):
            T.log(T.Tensor([1.0, -1.0]))


class TestShapeOps:
    def test_add_bias_gradient(self):
        rng = np.random.default_rng(2)
        x = T.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        b = T.Tensor(rng.normal(size=3), requires_grad=True)
        check_grads(lambda: T.sum_all(T.tanh(T.add_bias(x, b))), [x, b])

    def test_concat_narrow_roundtrip(self):
        a = T.Tensor(np.arange(6.0).reshape(2, 3))
        b = T.Tensor(np.arange(6.0, 10.0).reshape(2, 2))
        c = T.concat([a, b], axis=1)
        assert c.shape == (2, 5)
        np.testing.assert_array_equal(T.narrow(c, 1, 3, 2).data, b.data)

    def test_concat_gradient(self):
        rng = np.random.default_rng(3)
        a = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        check_grads(lambda: T.sum_all(T.tanh(T.concat([a, b], axis=1))), [a, b])

    def test_narrow_gradient(self):
        rng = np.random.default_rng(4)
        a = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        check_grads(lambda: T.sum_all(T.tanh(T.narrow(a, 1, 2, 3))), [a])

    def test_narrow_bounds(self):
        a = T.Tensor(np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            T.narrow(a, 1, 2, 2)

    def test_tile_new_axis_gradient_sums_over_copies(self):
        a = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            out = T.tile_new_axis(a, 0, 3)
            loss = T.sum_all(out)
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, [3.0, 3.0])

    def test_pad_axis_gradient(self):
        rng = np.random.default_rng(5)
        a = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        check_grads(lambda: T.sum_all(T.tanh(T.pad_axis(a, 0, 1, 2))), [a])

    def test_stack_and_reshape_gradients(self):
        rng = np.random.default_rng(6)
        a = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        check_grads(lambda: T.sum_all(T.tanh(T.stack([a, b], axis=1))), [a, b])
        check_grads(lambda: T.sum_all(T.tanh(T.reshape(a, (3, 2)))), [a])

    def test_take_columns_scatter_adds_duplicates(self):
        e = T.Tensor(np.arange(8.0).reshape(2, 4), requires_grad=True)
        with T.Tape() as tape:
            picked = T.take_columns(e, [1, 1, 3])
            loss = T.sum_all(picked)
        tape.backward(loss)
        np.testing.assert_array_equal(e.grad, [[0, 2, 0, 1], [0, 2, 0, 1]])

    def test_take_rows_gradient(self):
        rng = np.random.default_rng(7)
        e = T.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        check_grads(lambda: T.sum_all(T.tanh(T.take_rows(e, [0, 2, 2]))), [e])

    def test_log_softmax_rows_normalize(self):
        rng = np.random.default_rng(8)
        a = T.Tensor(rng.normal(size=(4, 7)) * 30)
        p = np.exp(T.log_softmax(a).data)
        np.testing.assert_allclose(p.sum(axis=1), np.ones(4), rtol=1e-12)

    def test_log_softmax_gradient(self):
        rng = np.random.default_rng(9)
        a = T.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        w = T.constant(rng.normal(size=(3, 5)))
        check_grads(lambda: T.sum_all(T.hadamard(T.log_softmax(a), w)), [a])


class TestConv2d:
    def test_extent_arithmetic(self):
        # stride-1 3x3 shrinks 40 -> 38 -> 36, then stride-2 3x3 gives 17
        x = T.Tensor(np.zeros((40, 40, 2)))
        k = T.Tensor(np.zeros((3, 3, 2, 2)))
        b = T.zeros(2)
        y1 = T.conv2d(x, k, 1, b)
        assert y1.shape == (38, 38, 2)
        y2 = T.conv2d(y1, k, 1, b)
        assert y2.shape == (36, 36, 2)
        y3 = T.conv2d(y2, k, 2, b)
        assert y3.shape == (17, 17, 2)

    def test_matches_direct_computation(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(5, 6, 3))
        k = rng.normal(size=(3, 3, 3, 4))
        bias = rng.normal(size=4)
        y = T.conv2d(T.Tensor(x), T.Tensor(k), 2, T.Tensor(bias)).data
        assert y.shape == (2, 2, 4)
        for oh in range(2):
            for ow in range(2):
                patch = x[2 * oh:2 * oh + 3, 2 * ow:2 * ow + 3, :]
                want = np.tensordot(patch, k, axes=([0, 1, 2], [0, 1, 2])) + bias
                np.testing.assert_allclose(y[oh, ow], want, rtol=1e-12)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            T.conv2d(T.Tensor(np.zeros((2, 2, 1))), T.Tensor(np.zeros((3, 3, 1, 1))),
                     1, T.zeros(1))

    def test_gradients_batched_strided(self):
        rng = np.random.default_rng(11)
        x = T.Tensor(rng.normal(size=(2, 5, 5, 2)), requires_grad=True)
        k = T.Tensor(rng.normal(size=(3, 3, 2, 3)) * 0.5, requires_grad=True)
        b = T.Tensor(rng.normal(size=3), requires_grad=True)
        check_grads(lambda: T.sum_all(T.tanh(T.conv2d(x, k, 2, b))), [x, k, b])

    def test_gradients_overlapping_windows(self):
        rng = np.random.default_rng(12)
        x = T.Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        k = T.Tensor(rng.normal(size=(2, 2, 2, 2)) * 0.5, requires_grad=True)
        b = T.Tensor(rng.normal(size=2), requires_grad=True)
        check_grads(lambda: T.sum_all(T.sigmoid(T.conv2d(x, k, 1, b))), [x, k, b])


class TestMeanPool:
    def test_requires_full_window(self):
        with pytest.raises(ShapeError):
            T.mean_pool(T.Tensor(np.zeros((1, 4, 4, 2))), 2)

    def test_forward_and_gradient(self):
        rng = np.random.default_rng(13)
        x = T.Tensor(rng.normal(size=(2, 3, 3, 4)), requires_grad=True)
        y = T.mean_pool(x, 3)
        assert y.shape == (2, 1, 1, 4)
        np.testing.assert_allclose(y.data[:, 0, 0, :], x.data.mean(axis=(1, 2)), rtol=1e-12)
        check_grads(lambda: T.sum_all(T.tanh(T.mean_pool(x, 3))), [x])


class TestBatchNorm:
    def test_train_output_standardized(self):
        rng = np.random.default_rng(14)
        x = T.Tensor(rng.normal(3.0, 2.5, size=(64, 5)))
        gamma, beta = T.ones(5), T.zeros(5)
        stats = T.BatchNormStats(5)
        y = T.batch_norm(x, gamma, beta, stats, T.TRAIN).data
        np.testing.assert_allclose(y.mean(axis=0), np.zeros(5), atol=1e-10)
        # var comes out at var/(var+eps), a hair under 1 by design
        np.testing.assert_allclose(y.var(axis=0), np.ones(5), rtol=1e-5)

    def test_train_requires_two_rows(self):
        stats = T.BatchNormStats(3)
        with pytest.raises(ConfigError):
            T.batch_norm(T.Tensor(np.zeros((1, 3))), T.ones(3), T.zeros(3), stats, T.TRAIN)

    def test_running_stats_ema(self):
        rng = np.random.default_rng(15)
        x = rng.normal(2.0, 1.0, size=(32, 4))
        stats = T.BatchNormStats(4)
        T.batch_norm(T.Tensor(x), T.ones(4), T.zeros(4), stats, T.TRAIN, decay=0.9)
        np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(stats.var, 0.9 * 1.0 + 0.1 * x.var(axis=0), rtol=1e-12)

    def test_infer_uses_running_stats_any_batch(self):
        stats = T.BatchNormStats(2)
        stats.mean = np.array([1.0, -1.0])
        stats.var = np.array([4.0, 0.25])
        y = T.batch_norm(T.Tensor([[3.0, 0.0]]), T.ones(2), T.zeros(2), stats, T.INFER,
                         eps=0.0).data
        np.testing.assert_allclose(y, [[1.0, 2.0]], rtol=1e-12)

    def test_gradients_train_and_infer(self):
        rng = np.random.default_rng(16)
        x = T.Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        gamma = T.Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
        beta = T.Tensor(rng.normal(size=4), requires_grad=True)
        stats = T.BatchNormStats(4)
        # update_stats=False keeps the loss a pure function during probing
        check_grads(
            lambda: T.sum_all(T.tanh(T.batch_norm(
                x, gamma, beta, stats, T.TRAIN, update_stats=False))),
            [x, gamma, beta], eps=1e-6, rtol=1e-5, atol=1e-7)
        stats.mean = rng.normal(size=4)
        stats.var = rng.uniform(0.5, 2.0, size=4)
        check_grads(
            lambda: T.sum_all(T.tanh(T.batch_norm(x, gamma, beta, stats, T.INFER))),
            [x, gamma, beta])


class TestDropout:
    def test_infer_is_identity(self):
        x = T.Tensor(np.arange(10.0))
        assert T.dropout(x, 0.5, T.INFER) is x

    def test_zero_fraction_near_rate(self):
        x = T.Tensor(np.ones(100_000))
        y = T.dropout(x, 0.2, T.TRAIN, rng=T.Rng(17)).data
        zero_frac = float((y == 0).mean())
        assert abs(zero_frac - 0.2) < 0.01
        kept = y[y != 0]
        np.testing.assert_allclose(kept, np.full_like(kept, 1.0 / 0.8), rtol=1e-12)

    def test_gradient_uses_same_mask(self):
        x = T.Tensor(np.random.default_rng(18).normal(size=(50,)), requires_grad=True)
        with T.Tape() as tape:
            y = T.dropout(x, 0.3, T.TRAIN, rng=T.Rng(19))
            loss = T.sum_all(y)
        tape.backward(loss)
        np.testing.assert_array_equal((x.grad == 0), (y.data == 0))

    def test_invalid_rate(self):
        with pytest.raises(ConfigError):
            T.dropout(T.Tensor([1.0]), 1.0, T.TRAIN, rng=T.Rng(0))


class TestTapeMechanics:
    def test_backward_requires_scalar(self):
        a = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            out = T.scale(a, 2.0)
        with pytest.raises(UsageError):
            tape.backward(out)

    def test_backward_on_empty_tape(self):
        with T.Tape() as tape:
            pass
        with pytest.raises(UsageError):
            tape.backward(T.Tensor(1.0))

    def test_tape_cleared_after_backward(self):
        a = T.Tensor([1.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.scale(a, 3.0))
        tape.backward(loss)
        assert len(tape) == 0
        with pytest.raises(UsageError):
            tape.backward(loss)

    def test_grads_accumulate_across_reuse(self):
        a = T.Tensor([2.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.add(T.hadamard(a, a), a))  # a^2 + a
        tape.backward(loss)
        np.testing.assert_allclose(a.grad, [5.0])

    def test_constants_get_no_grad(self):
        a = T.Tensor([1.0], requires_grad=True)
        c = T.constant([4.0])
        with T.Tape() as tape:
            loss = T.sum_all(T.hadamard(a, c))
        tape.backward(loss)
        assert c.grad is None

    def test_threads_have_independent_tapes(self):
        errors = []

        def work(seed):
            try:
                rng = np.random.default_rng(seed)
                a = T.Tensor(rng.normal(size=(8, 8)), requires_grad=True)
                for _ in range(20):
                    a.zero_grad()
                    with T.Tape() as tape:
                        loss = T.sum_all(T.tanh(T.matmul(a, a)))
                    tape.backward(loss)
                    assert a.grad is not None and a.grad.shape == (8, 8)
            except Exception as exc:  # surfaced below
                errors.append(exc)

        threads = [threading.Thread(target=work, args=(s,)) for s in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []


class TestDeterminism:
    def test_forward_chain_bitwise_stable(self):
        def run():
            rng = T.Rng(21)
            x = T.Tensor(rng.normal((6, 6)))
            w = T.Tensor(rng.normal((6, 6)) * 0.3)
            return T.sum_all(T.tanh(T.matmul(T.sigmoid(x), w))).item()

        assert run() == run()
