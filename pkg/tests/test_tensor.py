import numpy as np
import pytest

from haarnet.errors import ContractError, GraphStateError, ShapeError
from haarnet.tensor import (
    Graph,
    Tensor,
    backward,
    cat,
    elementwise,
    expand,
    finite_diff_grad,
    global_avg_pool,
    max_all,
    maximum,
    mean,
    mul,
    no_grad,
    pad_replicate,
    record_decisions,
    relative_error,
    sigmoid,
    upsample_nearest,
)
from haarnet.tensor import sum as tsum


def leaf(values):
    return Tensor(values, requires_grad=True)


class TestTensor:
    def test_rank_is_left_padded(self):
        assert Tensor([1.0, 2.0]).shape == (1, 1, 1, 2)
        assert Tensor(np.zeros((3, 4))).shape == (1, 1, 3, 4)

    def test_rank_above_four_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_storage_is_float32(self):
        assert Tensor([1, 2]).dtype == np.float32

    def test_negative_infinity_is_neutral_for_max(self):
        out = maximum(Tensor([-np.inf, -np.inf]), Tensor([3.0, -1.0]))
        np.testing.assert_array_equal(out.data.ravel(), [3.0, -1.0])


class TestElementwise:
    def test_mul(self):
        assert elementwise("mul", Tensor([2.0]), Tensor([3.0])).item() == 6.0

    def test_sigmoid_at_zero(self):
        assert elementwise("sigmoid", Tensor([0.0])).item() == 0.5

    def test_max_with_negative_infinity(self):
        out = elementwise("max", Tensor([1.0, -np.inf]), Tensor([0.0, 4.0]))
        np.testing.assert_array_equal(out.data.ravel(), [1.0, 4.0])

    def test_sigmoid_extremes_do_not_overflow(self):
        with np.errstate(over="raise"):
            out = sigmoid(Tensor([-1000.0, 1000.0])).data.ravel()
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_per_channel_broadcast(self):
        a = Tensor(np.ones((2, 3, 2, 2)))
        b = Tensor(np.arange(3.0).reshape(1, 3, 1, 1))
        out = elementwise("add", a, b)
        np.testing.assert_array_equal(out.data[1, :, 1, 1], [1.0, 2.0, 3.0])

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            elementwise("add", Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 3, 2, 2))))

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            elementwise("pow", Tensor([1.0]), Tensor([2.0]))

    def test_max_tie_goes_to_first_operand(self):
        a, b = leaf([2.0]), leaf([2.0])
        backward(tsum(maximum(a, b)))
        assert a.grad.item() == 1.0
        assert b.grad.item() == 0.0

    def test_mul_routes_other_operand(self):
        a, b = leaf([2.0]), leaf([5.0])
        backward(tsum(mul(a, b)))
        assert a.grad.item() == 5.0
        assert b.grad.item() == 2.0

    def test_broadcast_gradient_is_reduced(self):
        a = leaf(np.ones((2, 3, 2, 2)))
        b = leaf(np.ones((1, 3, 1, 1)))
        backward(tsum(mul(a, b)))
        np.testing.assert_array_equal(b.grad.ravel(), [8.0, 8.0, 8.0])

    def test_sigmoid_gradient(self):
        x = leaf([0.3])
        backward(tsum(sigmoid(x)))
        s = 1 / (1 + np.exp(-0.3))
        np.testing.assert_allclose(x.grad.item(), s * (1 - s), rtol=1e-6)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(4.0).reshape(1, 1, 2, 2))
        backward(tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((1, 1, 2, 2)))

    def test_max_routes_to_unique_argmax(self):
        x = leaf([1.0, 3.0, 2.0])
        backward(max_all(x))
        np.testing.assert_array_equal(x.grad.ravel(), [0.0, 1.0, 0.0])

    def test_square(self):
        x = leaf([2.0])
        backward(tsum(mul(x, x)))
        assert x.grad.item() == 4.0

    def test_fan_out_accumulates(self):
        x = leaf([1.5])
        backward(tsum(x + x))
        assert x.grad.item() == 2.0

    def test_grads_accumulate_across_passes(self):
        x = leaf([1.0])
        backward(tsum(x * 3.0))
        backward(tsum(x * 3.0))
        assert x.grad.item() == 6.0

    def test_non_scalar_loss(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_second_backward_is_a_state_error(self):
        x = leaf([1.0])
        loss = tsum(x * 2.0)
        backward(loss)
        with pytest.raises(GraphStateError):
            backward(loss)

    def test_graph_is_topologically_ordered(self):
        x = leaf([1.0])
        y = x * 2.0
        z = y + x
        loss = tsum(z * y)
        graph = Graph.trace(loss)
        position = {id(t): i for i, t in enumerate(graph.nodes)}
        for t in graph.nodes:
            if t._node is not None:
                for inp in t._node.inputs:
                    if id(inp) in position:
                        assert position[id(inp)] < position[id(t)]
        assert len(graph) == 4

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert y._node is None and not y.requires_grad

    def test_constant_loss_rejected(self):
        with pytest.raises(ContractError):
            backward(tsum(Tensor([1.0])))


class TestStructuralOps:
    def test_cat_and_gradient(self):
        a, b = leaf(np.ones((1, 1, 2, 2))), leaf(np.ones((1, 2, 2, 2)))
        out = cat([a, b])
        assert out.shape == (1, 3, 2, 2)
        backward(tsum(mul(out, Tensor(np.arange(3.0).reshape(1, 3, 1, 1)))))
        np.testing.assert_array_equal(b.grad[0, :, 0, 0], [1.0, 2.0])

    def test_global_avg_pool_and_expand(self):
        x = leaf(np.arange(8.0).reshape(1, 2, 2, 2))
        pooled = global_avg_pool(x)
        np.testing.assert_array_equal(pooled.data.ravel(), [1.5, 5.5])
        backward(tsum(expand(pooled, (1, 2, 3, 3))))
        np.testing.assert_allclose(x.grad, np.full((1, 2, 2, 2), 9 / 4))

    def test_upsample_nearest(self):
        x = leaf([[1.0, 2.0]])
        out = upsample_nearest(x, 2)
        np.testing.assert_array_equal(out.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])
        backward(tsum(out))
        np.testing.assert_array_equal(x.grad.ravel(), [4.0, 4.0])

    def test_pad_replicate_gradient_folds_back(self):
        x = leaf(np.arange(6.0).reshape(1, 1, 2, 3))
        out = pad_replicate(x, 1, 1)
        assert out.shape == (1, 1, 3, 4)
        backward(tsum(out))
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 1, 2], [2, 2, 4]])

    def test_mean(self):
        x = leaf(np.arange(4.0))
        backward(mean(x))
        np.testing.assert_array_equal(x.grad.ravel(), [0.25] * 4)


class TestFiniteDifferences:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        np.testing.assert_allclose(finite_diff_grad(tsum, x, 1e-3).data, 1.0, atol=1e-6)

    def test_square(self):
        g = finite_diff_grad(lambda t: tsum(mul(t, t)), Tensor([2.0]), 1e-3)
        np.testing.assert_allclose(g.item(), 4.0, atol=1e-5)

    def test_eps_must_be_positive(self):
        with pytest.raises(ContractError):
            finite_diff_grad(tsum, Tensor([1.0]), 0.0)

    def test_matches_backward_at_generic_point(self, rng):
        w = Tensor(rng.standard_normal((1, 1, 3, 3)))

        def f(t):
            return tsum(mul(sigmoid(mul(t, t)), w))

        x = leaf(rng.standard_normal((1, 1, 3, 3)))
        backward(f(x))
        numeric = finite_diff_grad(f, x, 1e-3).data
        assert relative_error(x.grad, numeric) < 1e-4

    def test_relative_error_scale(self):
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.002])) == pytest.approx(0.001 / 1.001, rel=1e-3)
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_record_decisions_captures_max_masks():
    with record_decisions() as log:
        maximum(Tensor([1.0, 3.0]), Tensor([2.0, 2.0]))
    assert len(log) == 1
    np.testing.assert_array_equal(log[0].ravel(), [False, True])
