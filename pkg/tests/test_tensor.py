"""Tensor core: op semantics, gradients vs finite differences, invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expertfuse import tensor as T
from expertfuse.errors import ContractError, ShapeError


def naive_matmul(a, b):
    """Triple-loop reference product, independent of numpy matmul."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        out = T.matmul(T.Tensor(a), T.Tensor(np.eye(3)))
        np.testing.assert_allclose(out.data, a)

    def test_against_naive_oracle(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        expected = naive_matmul(a, b)
        np.testing.assert_array_equal(expected, [[17.0], [39.0]])
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        np.testing.assert_array_equal(out.data, expected)

    def test_random_against_naive_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        np.testing.assert_allclose(out.data, naive_matmul(a, b), rtol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
        err = T.grad_check(
            lambda p: T.reduce_sum(T.matmul(p["a"], p["b"])), params)
        assert err < 1e-6

    def test_batched_gradient(self):
        rng = np.random.default_rng(3)
        params = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 3))}
        err = T.grad_check(
            lambda p: T.reduce_sum(T.matmul(p["a"], p["b"])), params)
        assert err < 1e-4


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(T.Tensor([2.5, 2.5, 2.5, 2.5]))
        np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25])

    def test_analytic(self):
        out = T.softmax(T.Tensor([0.0, math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5,))
        base = T.softmax(T.Tensor(x)).data
        shifted = T.softmax(T.Tensor(x + 7.0)).data
        np.testing.assert_allclose(shifted, base, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
           st.integers(0, 3))
    def test_rows_sum_to_one(self, values, extra_rows):
        data = np.tile(np.asarray(values), (extra_rows + 1, 1))
        out = T.softmax(T.Tensor(data), axis=-1).data
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)

    def test_nonfinite_input_rejected(self):
        from expertfuse.errors import NumericError
        with pytest.raises(NumericError, match="non-finite"):
            T.softmax(T.Tensor([0.0, np.inf]))

    def test_gradient(self):
        rng = np.random.default_rng(5)
        params = {"x": rng.normal(size=(3, 5))}
        w = rng.normal(size=(3, 5))
        err = T.grad_check(
            lambda p: T.reduce_sum(T.mul(T.softmax(p["x"]), T.Tensor(w))), params)
        assert err < 1e-4


class TestLayerNorm:
    def test_constant_slice_is_zero(self):
        out = T.layer_norm(T.Tensor([[3.0, 3.0, 3.0]]),
                           T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_two_point_analytic(self):
        out = T.layer_norm(T.Tensor([1.0, 3.0]), T.Tensor(np.ones(2)),
                           T.Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)

    def test_width_one_is_guarded_by_eps(self):
        out = T.layer_norm(T.Tensor([[4.0]]), T.Tensor(np.ones(1)),
                           T.Tensor([0.25]), eps=1e-5)
        np.testing.assert_allclose(out.data, [[0.25]])

    def test_zero_eps_rejected(self):
        with pytest.raises(ValueError, match="eps"):
            T.layer_norm(T.Tensor([1.0, 2.0]), T.Tensor(np.ones(2)),
                         T.Tensor(np.zeros(2)), eps=0.0)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        params = {"x": rng.normal(size=(4, 6)),
                  "g": rng.normal(size=(6,)) + 1.0,
                  "b": rng.normal(size=(6,))}
        w = rng.normal(size=(4, 6))
        err = T.grad_check(
            lambda p: T.reduce_sum(
                T.mul(T.layer_norm(p["x"], p["g"], p["b"]), T.Tensor(w))),
            params)
        assert err < 1e-5


class TestSquaredRelu:
    def test_negative_branch(self):
        assert T.squared_relu(T.Tensor([-2.0])).data[0] == 0.0

    def test_positive_value_and_derivative(self):
        x = T.Tensor([3.0], requires_grad=True)
        y = T.reduce_sum(T.squared_relu(x))
        assert y.item() == 9.0
        y.backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_derivative_at_zero_is_zero(self):
        x = T.Tensor([0.0], requires_grad=True)
        T.reduce_sum(T.squared_relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_gradient(self):
        rng = np.random.default_rng(7)
        params = {"x": rng.normal(size=(10,)) + 0.5}
        err = T.grad_check(lambda p: T.reduce_sum(T.squared_relu(p["x"])), params)
        assert err < 1e-4


class TestConv2d:
    def test_constant_image_interior(self):
        image = np.full((5, 5, 1), 5.0)
        kernel = np.ones((3, 3, 1, 1))
        out = T.conv2d(T.Tensor(image), T.Tensor(kernel)).data[:, :, 0]
        assert out[2, 2] == 45.0
        assert out[0, 0] == 20.0   # corner sees a 2x2 window
        assert out[0, 2] == 30.0   # edge sees a 2x3 window

    def test_impulse_reproduces_flipped_kernel(self):
        image = np.zeros((5, 5, 1))
        image[2, 2, 0] = 1.0
        rng = np.random.default_rng(8)
        kernel = rng.normal(size=(3, 3, 1, 1))
        out = T.conv2d(T.Tensor(image), T.Tensor(kernel)).data[:, :, 0]
        footprint = out[1:4, 1:4]
        np.testing.assert_allclose(footprint, kernel[::-1, ::-1, 0, 0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9))
    def test_stride_two_takes_ceil(self, h, w):
        out = T.conv2d(T.Tensor(np.zeros((h, w, 1))),
                       T.Tensor(np.zeros((3, 3, 1, 2))), stride=2)
        assert out.shape == ((h + 1) // 2, (w + 1) // 2, 2)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channel"):
            T.conv2d(T.Tensor(np.zeros((4, 4, 2))), T.Tensor(np.zeros((3, 3, 3, 1))))

    def test_kernel_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(5, 4, 2))
        params = {"k": rng.normal(size=(3, 3, 2, 3))}
        err = T.grad_check(
            lambda p: T.reduce_sum(T.conv2d(T.Tensor(x), p["k"], stride=1)), params)
        assert err < 1e-5

    def test_input_gradient_stride_two(self):
        rng = np.random.default_rng(10)
        k = rng.normal(size=(3, 3, 2, 2))
        params = {"x": rng.normal(size=(5, 5, 2))}
        err = T.grad_check(
            lambda p: T.reduce_sum(T.conv2d(p["x"], T.Tensor(k), stride=2)), params)
        assert err < 1e-5


class TestCrossEntropy:
    def test_confident_prediction_near_zero_loss(self):
        logits = np.zeros((3, 4))
        targets = np.array([1, 2, 0])
        logits[np.arange(3), targets] = 40.0
        loss = T.cross_entropy(T.Tensor(logits), targets)
        assert loss.item() < 1e-6

    def test_uniform_logits_log_vocab(self):
        loss = T.cross_entropy(T.Tensor(np.zeros((5, 8))), np.zeros(5, dtype=int))
        assert abs(loss.item() - math.log(8.0)) < 1e-12

    def test_two_token_manual_oracle(self):
        logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
        targets = np.array([1, 2])
        # independent scalar arithmetic
        expected = 0.0
        for row, target in zip(logits, targets):
            z = math.log(sum(math.exp(v) for v in row))
            expected += -(row[target] - z)
        expected /= 2.0
        loss = T.cross_entropy(T.Tensor(logits), targets)
        assert abs(loss.item() - expected) < 1e-12

    def test_mask_excludes_positions(self):
        logits = np.array([[10.0, 0.0], [0.0, 10.0]])
        loss = T.cross_entropy(T.Tensor(logits), np.array([1, 1]),
                               mask=np.array([False, True]))
        assert loss.item() < 1e-4

    def test_all_masked_is_an_error(self):
        with pytest.raises(ContractError, match="empty"):
            T.cross_entropy(T.Tensor(np.zeros((2, 4))), np.array([0, 1]),
                            mask=np.array([False, False]))

    def test_gradient(self):
        rng = np.random.default_rng(11)
        targets = np.array([0, 3, 1, 2])
        mask = np.array([True, True, False, True])
        params = {"logits": rng.normal(size=(4, 5))}
        err = T.grad_check(
            lambda p: T.cross_entropy(p["logits"], targets, mask), params)
        assert err < 1e-6


class TestAutogradMechanics:
    def test_linear_function_is_exact(self):
        params = {"x": np.array([2.0, -1.0, 0.5])}
        err = T.grad_check(lambda p: T.reduce_sum(T.mul(p["x"], T.Tensor(3.0))),
                           params)
        assert err < 1e-9

    def test_frozen_branch_gets_no_grad(self):
        a = T.Tensor([1.0, 2.0], requires_grad=True)
        b = T.Tensor([3.0, 4.0], requires_grad=False)
        T.reduce_sum(T.mul(a, b)).backward()
        assert a.grad is not None
        assert b.grad is None

    def test_grad_shape_matches_tensor_shape(self):
        a = T.Tensor(np.ones((2, 3)), requires_grad=True)
        T.reduce_sum(T.mul(a, a)).backward()
        assert a.grad.shape == (2, 3)

    def test_reused_node_accumulates_once_per_path(self):
        x = T.Tensor([2.0], requires_grad=True)
        y = T.add(T.mul(x, x), T.mul(x, T.Tensor(3.0)))   # x^2 + 3x
        T.reduce_sum(y).backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_backward_requires_scalar(self):
        a = T.Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ContractError, match="scalar"):
            T.mul(a, a).backward()

    def test_no_grad_blocks_graph(self):
        a = T.Tensor([1.0], requires_grad=True)
        with T.no_grad():
            out = T.mul(a, a)
        assert not out.requires_grad and out._parents == ()

    def test_broadcast_add_gradient(self):
        rng = np.random.default_rng(12)
        params = {"x": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}
        err = T.grad_check(
            lambda p: T.reduce_sum(T.squared_relu(T.add(p["x"], p["b"]))), params)
        assert err < 1e-4

    def test_concat_and_slice_gradients(self):
        rng = np.random.default_rng(13)
        params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(4, 3))}

        def build(p):
            joined = T.concat([p["a"], p["b"]], axis=0)
            return T.reduce_sum(T.squared_relu(joined[1:5]))

        assert T.grad_check(build, params) < 1e-4

    def test_composite_block_gradient(self):
        rng = np.random.default_rng(14)
        params = {"w1": rng.normal(size=(4, 8)), "w2": rng.normal(size=(8, 4)),
                  "x": rng.normal(size=(3, 4)), "g": np.ones(4), "b": np.zeros(4)}
        probe = rng.normal(size=(3, 4))

        def build(p):
            h = T.squared_relu(T.matmul(p["x"], p["w1"]))
            y = T.add(p["x"], T.matmul(h, p["w2"]))
            return T.reduce_sum(T.mul(T.layer_norm(y, p["g"], p["b"]),
                                      T.Tensor(probe)))

        assert T.grad_check(build, params) < 1e-4
