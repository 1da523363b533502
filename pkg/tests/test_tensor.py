import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from aegan.tensor import Tensor, concat, default_dtype, get_default_dtype, no_grad, unbroadcast


def leaf(values, dtype=np.float64):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


class TestBackwardSemantics:
    def test_linear_map_gradient_is_the_constant(self):
        x = np.array([1.0, -2.0, 3.5])
        w = leaf([0.3, 0.1, -0.7])
        (w * Tensor(x)).sum().backward()
        np.testing.assert_array_equal(w.grad, x)

    def test_repeated_backward_accumulates(self):
        w = leaf([1.0, 2.0])
        for _ in range(3):
            (w * w).sum().backward()
        np.testing.assert_allclose(w.grad, 3 * 2 * w.data)

    def test_zero_grad_clears(self):
        w = leaf([1.0])
        (w * 2).sum().backward()
        w.zero_grad()
        assert w.grad is None

    def test_non_scalar_loss_rejected(self):
        w = leaf([1.0, 2.0])
        with pytest.raises(ValueError, match="scalar"):
            (w * 2).backward()

    def test_loss_without_trainable_inputs_rejected(self):
        with pytest.raises(RuntimeError):
            Tensor(np.ones(2)).sum().backward()

    def test_shared_subexpression_gradients_add(self):
        x = leaf([2.0])
        y = x * x
        (y + y * 3).sum().backward()
        np.testing.assert_allclose(x.grad, [4 * 2 * 2.0])

    def test_no_grad_builds_no_graph(self):
        w = leaf([1.0])
        with no_grad():
            y = w * 3
        assert not y.requires_grad and y.is_leaf

    def test_detach_cuts_the_graph(self):
        w = leaf([1.0, 2.0])
        y = (w * 2).detach()
        assert not y.requires_grad
        np.testing.assert_array_equal(y.data, [2.0, 4.0])

    def test_grad_has_parameter_shape(self):
        w = leaf(np.ones((3, 1)))
        (w * Tensor(np.ones((3, 4)))).sum().backward()
        assert w.grad.shape == w.shape
        np.testing.assert_array_equal(w.grad, np.full((3, 1), 4.0))

    def test_getitem_with_repeated_index_accumulates(self):
        w = leaf([1.0, 2.0, 3.0])
        w[np.array([0, 0, 2])].sum().backward()
        np.testing.assert_array_equal(w.grad, [2.0, 0.0, 1.0])

    def test_concat_splits_gradient(self):
        a, b = leaf(np.ones((1, 2))), leaf(np.ones((2, 2)))
        (concat([a, b], axis=0) * Tensor(np.arange(6.0).reshape(3, 2))).sum().backward()
        np.testing.assert_array_equal(a.grad, [[0.0, 1.0]])
        np.testing.assert_array_equal(b.grad, [[2.0, 3.0], [4.0, 5.0]])


class TestDtypes:
    def test_default_is_float32(self):
        assert Tensor([1, 2]).dtype == np.float32

    def test_default_dtype_context(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert get_default_dtype() == np.float32

    def test_float64_scalar_results_keep_precision(self):
        a = Tensor(np.array(1.0 / 3.0))
        assert (a * a).dtype == np.float64

    def test_size_matches_shape(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.size == np.prod(t.shape) == t.data.size


@settings(max_examples=60, deadline=None)
@given(
    st.data(),
    arrays(np.float64, array_shapes(min_dims=1, max_dims=3, max_side=4), elements=st.floats(-10, 10)),
)
def test_unbroadcast_inverts_broadcasting(data, grad):
    # pick a target shape that broadcasts to grad.shape
    shape = tuple(data.draw(st.sampled_from([1, n])) for n in grad.shape)
    drop = data.draw(st.integers(0, len(shape) - 1))
    target = shape[drop:]
    reduced = unbroadcast(grad, target)
    assert reduced.shape == target
    assert np.isclose(reduced.sum(), grad.sum())


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), arrays(np.float64, (4,), elements=st.floats(-5, 5)))
def test_broadcast_add_gradients(a, b):
    ta, tb = leaf(a), leaf(b)
    (ta + tb).sum().backward()
    np.testing.assert_array_equal(ta.grad, np.ones_like(a))
    np.testing.assert_array_equal(tb.grad, np.full(4, 3.0))


def test_graph_is_acyclic_and_identical_runs_are_bitwise_equal():
    def run():
        rng = np.random.default_rng(5)
        w = Tensor(rng.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
        x = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
        loss = ((x @ w).exp() * 0.1).mean()
        loss.backward()
        return loss.data.copy(), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()
