import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsicf import tensor as tn
from tsicf.errors import ContractError, ShapeError
from tsicf.tensor import Tape, Tensor, check_gradients, gradient_pair, gradient_rel_error


def rand(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def weighted_sum(y, seed=99):
    # a random linear functional keeps every output entry in the gradient
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return tn.sum_(tn.mul(y, w))


class TestMatmul:
    def test_identity(self):
        out = tn.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_row_times_column(self):
        out = tn.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            tn.matmul(rand(2, 3), rand(4, 2))

    def test_gradient(self):
        a, b = rand(3, 4, seed=1), rand(4, 2, seed=2)
        assert check_gradients(lambda: weighted_sum(tn.matmul(a, b)), [a, b]) < 1e-6

    def test_batched_broadcast_gradient(self):
        a, b = rand(2, 3, 4, seed=1), rand(4, 5, seed=2)
        assert check_gradients(lambda: weighted_sum(a @ b), [a, b]) < 1e-6


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(tn.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_no_overflow(self):
        y = tn.softmax_lastdim(Tensor([1000.0, 0.0])).data
        assert y[0] == 1.0 and 0.0 <= y[1] < 1e-300
        assert np.isfinite(y).all()

    def test_normalized(self):
        y = tn.softmax_lastdim(rand(5, seed=3)).data
        assert abs(y.sum() - 1.0) <= 1e-12

    def test_masked_entries_exactly_zero(self):
        allowed = np.array([True, False, True, False])
        y = tn.softmax_lastdim(rand(4), allowed).data
        assert y[1] == 0.0 and y[3] == 0.0
        assert abs(y.sum() - 1.0) <= 1e-12

    def test_fully_masked_row_is_zero(self):
        y = tn.softmax_lastdim(rand(2, 3), np.array([[False] * 3, [True] * 3])).data
        np.testing.assert_array_equal(y[0], 0.0)
        assert np.isfinite(y).all()

    def test_gradient(self):
        x = rand(3, 5, seed=4)
        allowed = np.random.default_rng(0).random((3, 5)) > 0.3
        allowed[:, 0] = True
        assert check_gradients(lambda: weighted_sum(tn.softmax_lastdim(x, allowed)), [x]) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)), elements=st.floats(-50, 50)))
    def test_rows_are_distributions(self, x):
        y = tn.softmax_lastdim(Tensor(x)).data
        assert (y >= 0).all() and (y <= 1).all()
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


class TestLayerNorm:
    def test_constant_slice_collapses(self):
        y = tn.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_array_equal(y, [0.0, 0.0, 0.0])

    def test_two_points(self):
        y = tn.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(y, [-1.0, 1.0], atol=1e-5)

    def test_gradient(self):
        x, g, b = rand(4, 6, seed=5), rand(6, seed=6), rand(6, seed=7)
        assert check_gradients(lambda: weighted_sum(tn.layer_norm(x, g, b)), [x, g, b]) < 1e-6

    def test_gain_shape_checked(self):
        with pytest.raises(ShapeError):
            tn.layer_norm(rand(2, 3), rand(4), rand(3))


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: tn.add(a, b),
        lambda a, b: tn.sub(a, b),
        lambda a, b: tn.mul(a, b),
        lambda a, b: tn.scale(a, -2.5),
        lambda a, b: tn.gelu(a),
        lambda a, b: tn.transpose(tn.reshape(a, (3, 2, 2)), (2, 0, 1)),
        lambda a, b: tn.concat([a, b], axis=0),
        lambda a, b: tn.getitem(a, (slice(1, 3), [0, 2])),
        lambda a, b: tn.where(np.array([[True, False, True, False]] * 3), a, b),
        lambda a, b: tn.masked_fill(a, np.eye(3, 4, dtype=bool), -7.0),
        lambda a, b: tn.mean(a, axis=1),
        lambda a, b: tn.sum_(a, axis=0, keepdims=True),
        lambda a, b: tn.add(a, tn.getitem(b, 0)),
    ],
    ids=["add", "sub", "mul", "scale", "gelu", "reshape-transpose", "concat", "slice", "where",
         "masked_fill", "mean", "sum", "broadcast"],
)
def test_op_gradients(op):
    a, b = rand(3, 4, seed=8), rand(3, 4, seed=9)
    assert check_gradients(lambda: weighted_sum(op(a, b)), [a, b]) < 1e-6


def test_relu_gradient_away_from_kink():
    x = Tensor(np.array([[-1.3, 0.4, 2.2], [0.7, -0.2, -3.0]]))
    assert check_gradients(lambda: weighted_sum(tn.relu(x)), [x]) < 1e-9


def test_relu_propagates_nan():
    assert np.isnan(tn.relu(Tensor([np.nan, 1.0])).data[0])


class TestCheckGradients:
    def test_square(self):
        x = Tensor(np.array(3.0))
        assert check_gradients(lambda: tn.mul(x, x), [x]) < 1e-9

    def test_constant_function(self):
        x = Tensor(np.array([1.0, 2.0]))
        assert check_gradients(lambda: Tensor(np.array(4.0)), [x]) == 0.0

    def test_rejects_non_scalar(self):
        x = rand(3)
        with pytest.raises(ContractError):
            check_gradients(lambda: tn.mul(x, x), [x])

    def test_detects_wrong_gradient(self):
        x = rand(3)

        def bad():
            # forward x^2 but with a gradient computed as if it were 3x
            y = tn.mul(x, x)
            return tn.sum_(tn.add(tn.scale(x, 3.0), tn.sub(Tensor(y.data), Tensor(tn.scale(x, 3.0).data))))

        assert check_gradients(bad, [x]) > 0.1
        assert gradient_rel_error(bad, [x]) > 0.1

    def test_pair_matches_closed_form(self):
        x = Tensor(np.array([1.0, -2.0, 0.5]))
        analytic, fd = gradient_pair(lambda: tn.sum_(tn.mul(x, x)), [x])
        np.testing.assert_array_equal(analytic, [2.0, -4.0, 1.0])
        np.testing.assert_allclose(fd, analytic, rtol=1e-8)

    def test_vector_error_ignores_structural_zero(self):
        # a shift shared by every softmax logit has an exactly zero gradient
        x = Tensor(np.array([[0.3, -1.2, 2.0]]))
        c = Tensor(np.array([[0.7]]))
        w = np.array([[1.0, -2.0, 0.5]])

        def f():
            return weighted_sum(tn.mul(tn.softmax_lastdim(tn.add(x, c)), Tensor(w)))

        assert gradient_rel_error(f, [x, c]) < 1e-8
        analytic, _ = gradient_pair(f, [c])
        assert abs(analytic[0]) < 1e-15


class TestTape:
    def test_nodes_are_topological(self):
        a, b = rand(2, 2, seed=1), rand(2, 2, seed=2)
        a.requires_grad = b.requires_grad = True
        with Tape() as tape:
            c = tn.matmul(a, b)
            d = tn.add(c, a)
            tn.sum_(d)
        for i, node in enumerate(tape.nodes):
            assert all(j < i for j in node.inputs)
        assert [n.op for n in tape.nodes] == ["matmul", "add", "sum"]

    def test_no_recording_without_grad(self):
        with Tape() as tape:
            tn.matmul(rand(2, 2), rand(2, 2))
        assert tape.nodes == []

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            y = tn.sum_(tn.add(tn.mul(x, x), x))
        tape.backward(y)
        np.testing.assert_allclose(x.grad, [5.0])

    def test_deterministic_forward(self):
        a, b = rand(8, 8, seed=1), rand(8, 8, seed=2)
        y1 = tn.softmax_lastdim(tn.layer_norm(a @ b, Tensor(np.ones(8)), Tensor(np.zeros(8)))).data
        y2 = tn.softmax_lastdim(tn.layer_norm(a @ b, Tensor(np.ones(8)), Tensor(np.zeros(8)))).data
        assert np.array_equal(y1, y2)
