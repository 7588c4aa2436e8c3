"""Gradient checks and graph bookkeeping of the autodiff engine."""

import numpy as np
import pytest

import tensor_engine as te
from errors import GraphConsumedError
from errors import NonFiniteError
from errors import ShapeError
from tensor_engine import Tensor


class TestGradients:
    def test_elementwise_chain(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4))
        err = te.check_gradients(lambda x, y: te.sum(te.divide(te.exp(te.multiply(x, 0.3)), y) - te.log(y) * x), [a, b])
        assert err < 1e-6

    def test_broadcast_add(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3,))
        assert te.check_gradients(lambda x, y: te.sum(te.multiply(te.add(x, y), te.add(x, y))), [a, b]) < 1e-6

    def test_matmul(self, rng):
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
        assert te.check_gradients(lambda x, y: te.sum(te.relu(te.matmul(x, y)) * 2.0), [a, b]) < 1e-6

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
    def test_conv2d(self, rng, stride, padding):
        x, w = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
        err = te.check_gradients(lambda a, b: te.mean(te.multiply(te.conv2d(a, b, stride, padding),
                                                                  te.conv2d(a, b, stride, padding))), [x, w])
        assert err < 1e-6

    def test_cross_entropy(self, rng):
        logits, labels = rng.normal(size=(5, 4)), rng.integers(0, 4, size=5)
        assert te.check_gradients(lambda z: te.cross_entropy_loss(z, labels), [logits]) < 1e-6

    def test_softmax_and_mse(self, rng):
        x, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        assert te.check_gradients(lambda a, b: te.mse_loss(te.softmax(a), b), [x, t]) < 1e-6

    def test_shape_plumbing(self, rng):
        x = rng.normal(size=(2, 3, 4))
        def fn(a):
            h = te.transpose(te.reshape(a, (6, 4)))[1:3]
            p = te.global_avg_pool(te.reshape(a, (1, 2, 3, 4)))
            return te.sum(h * h) + te.sum(p * p)

        assert te.check_gradients(fn, [x]) < 1e-6


class TestStraightThrough:
    def test_round_half_away_from_zero(self):
        np.testing.assert_array_equal(te.round_ste([0.5, -0.5, 1.5, -2.5, 0.49]).data, [1.0, -1.0, 2.0, -3.0, 0.0])

    def test_round_gradient_is_identity(self):
        x = Tensor([0.2, 1.7], requires_grad=True)
        te.backward(te.sum(te.round_ste(x) * 3.0))
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])

    def test_sign_zero_is_positive_and_gradient_clipped(self):
        x = Tensor([0.0, -0.3, 2.0], requires_grad=True)
        y = te.sign_ste(x)
        np.testing.assert_array_equal(y.data, [1.0, -1.0, 1.0])
        te.backward(te.sum(y))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 0.0])


class TestGraph:
    def test_graph_is_consumed(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = te.sum(x * x)
        te.backward(loss)
        with pytest.raises(GraphConsumedError):
            te.backward(loss)

    def test_gradients_leave_grad_untouched(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0], requires_grad=True)
        grads = te.gradients(te.sum(x * 2.0), {"x": x, "y": y})
        np.testing.assert_array_equal(grads["x"], [2.0, 2.0])
        np.testing.assert_array_equal(grads["y"], [0.0])
        assert x.grad is None

    def test_non_finite_loss(self):
        x = Tensor([-1.0], requires_grad=True)
        with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
            te.backward(te.sum(te.log(x)))

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            te.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ShapeError):
            te.backward(Tensor([1.0, 2.0], requires_grad=True) * 1.0)

    def test_weighted_sum_one_hot_is_exact(self, rng):
        tensors = [Tensor(rng.normal(size=(3,))) for _ in range(3)]
        out = te.weighted_sum([0.0, 1.0, 0.0], tensors)
        np.testing.assert_array_equal(out.data, tensors[1].data)


class TestTreeReduce:
    def test_matches_sum(self, rng):
        arrays = [rng.normal(size=4) for _ in range(7)]
        np.testing.assert_allclose(te.tree_reduce(arrays), np.sum(arrays, axis=0), rtol=1e-12)

    def test_is_deterministic(self, rng):
        arrays = [rng.normal(size=16) * 10.0 ** i for i in range(5)]
        assert te.tree_reduce(arrays).tobytes() == te.tree_reduce(list(arrays)).tobytes()

    def test_empty(self):
        with pytest.raises(ValueError):
            te.tree_reduce([])
