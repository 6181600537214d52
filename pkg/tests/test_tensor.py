import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mnagt import ConfigError, DataError, ShapeError, Tape, Tensor
from mnagt import tensor as T
from mnagt.oracle import numerical_gradient
from mnagt.verify import array_from_dense, relative_error


def grad_of(build, *leaves):
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    return [leaf.grad for leaf in leaves]


class TestMatmul:
    def test_identity(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_projector(self):
        p = Tensor([[1.0, 0.0], [0.0, 0.0]])
        v = Tensor([[5.0], [7.0]])
        np.testing.assert_array_equal(T.matmul(p, v).data, [[5.0], [0.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradient_matches_finite_differences(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), grad_enabled=True)
        b = Tensor(rng.normal(size=(4, 2)), grad_enabled=True)

        def build():
            return T.sum_all(T.matmul(a, b))

        ga, gb = grad_of(build, a, b)
        numeric = numerical_gradient(lambda: build().item(), [("a", a), ("b", b)])
        assert relative_error(ga, array_from_dense(numeric["a"])) < 1e-6
        assert relative_error(gb, array_from_dense(numeric["b"])) < 1e-6


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(
            T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]]
        )
        np.testing.assert_allclose(
            T.softmax_rows(Tensor([[1.0, 1.0, 1.0]])).data, [[1 / 3] * 3]
        )

    def test_large_logit_no_overflow(self):
        out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
        # shifted-exponent hand computation: e^0 / (e^0 + e^-1000)
        expected = np.array([[1.0 / (1.0 + math.exp(-1000.0)),
                              math.exp(-1000.0) / (1.0 + math.exp(-1000.0))]])
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, expected)

    def test_non_finite_input_rejected(self):
        with pytest.raises(FloatingPointError):
            T.softmax_rows(Tensor([[np.inf, 0.0]]))

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(
            np.float64,
            st.tuples(st.integers(1, 6), st.integers(1, 6)),
            elements=st.floats(-50, 50),
        )
    )
    def test_rows_sum_to_one(self, x):
        out = T.softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert (out >= 0).all()


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        x = Tensor(np.full((2, 4), 3.7))
        out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_already_normalized_row(self):
        out = T.layer_norm(
            Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12
        )
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-9)

    def test_row_statistics(self, rng):
        x = Tensor(rng.normal(size=(4, 8)) * 3 + 1)
        out = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), 1e-8).data
        assert np.abs(out.mean(axis=1)).max() < 1e-7
        assert np.abs(out.var(axis=1) - 1.0).max() < 1e-5


class TestElementwise:
    def test_gelu_zero(self):
        assert T.gelu(Tensor([[0.0]])).data[0, 0] == 0.0
        assert T.gelu(Tensor([[0.0]]), exact=True).data[0, 0] == 0.0

    def test_gelu_matches_exact_form_closely(self, rng):
        x = Tensor(rng.normal(size=(5, 5)))
        approx = T.gelu(x).data
        exact = T.gelu(x, exact=True).data
        assert np.abs(approx - exact).max() < 1e-3

    def test_relu(self):
        out = T.relu(Tensor([[-3.0, 3.0]])).data
        np.testing.assert_array_equal(out, [[0.0, 3.0]])

    def test_concat_cols_preserves_order(self, rng):
        a = Tensor(rng.normal(size=(3, 2)))
        b = Tensor(rng.normal(size=(3, 4)))
        out = T.concat_cols([a, b])
        assert out.shape == (3, 6)
        np.testing.assert_array_equal(out.data[:, :2], a.data)
        np.testing.assert_array_equal(out.data[:, 2:], b.data)

    def test_add_shape_error(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_rank3_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2, 2)))


class TestDropout:
    def test_p_zero_is_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        assert T.dropout(x, 0.0, True, rng) is x

    def test_eval_mode_is_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        assert T.dropout(x, 0.5, False, rng) is x

    def test_survivor_fraction(self):
        x = Tensor(np.ones((100, 100)))
        out = T.dropout(x, 0.5, True, np.random.default_rng(0)).data
        surviving = float((out != 0).mean())
        assert abs(surviving - 0.5) < 0.02
        # inverted scaling: survivors carry 1/(1-p)
        assert np.allclose(out[out != 0], 2.0)

    def test_invalid_probability(self, rng):
        x = Tensor(np.ones((2, 2)))
        with pytest.raises(ConfigError):
            T.dropout(x, 1.0, True, rng)
        with pytest.raises(ConfigError):
            T.dropout(x, -0.1, True, rng)

    def test_deterministic_under_seed(self):
        x = Tensor(np.ones((8, 8)))
        a = T.dropout(x, 0.3, True, np.random.default_rng(5)).data
        b = T.dropout(x, 0.3, True, np.random.default_rng(5)).data
        np.testing.assert_array_equal(a, b)


class TestCrossEntropy:
    def test_uniform_two_classes(self):
        loss = T.cross_entropy_logits(Tensor([[0.0, 0.0]]), [0])
        assert abs(loss.item() - math.log(2.0)) < 1e-12

    def test_saturation(self):
        logits = Tensor(20.0 * np.eye(3)[[0, 1, 2]])
        loss = T.cross_entropy_logits(logits, [0, 1, 2])
        assert loss.item() < 1e-3

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            T.cross_entropy_logits(Tensor([[0.0, 0.0]]), [2])

    def test_gradient_matches_finite_differences(self, rng):
        logits = Tensor(rng.normal(size=(3, 4)), grad_enabled=True)
        labels = [0, 3, 1]

        def build():
            return T.cross_entropy_logits(logits, labels)

        (grad,) = grad_of(build, logits)
        numeric = numerical_gradient(lambda: build().item(), [("l", logits)])
        assert relative_error(grad, array_from_dense(numeric["l"])) < 1e-6


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 5)), grad_enabled=True)
        with Tape() as tape:
            loss = T.sum_all(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 5)))

    def test_square_sum_analytic(self):
        x = Tensor([[3.0]], grad_enabled=True)
        with Tape() as tape:
            loss = T.sum_all(T.mul(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [[6.0]])

    def test_diamond_sums_both_paths(self, rng):
        x = Tensor(rng.normal(size=(3, 3)), grad_enabled=True)
        with Tape() as tape:
            loss = T.sum_all(T.add(T.mul(x, x), T.scale(x, 2.0)))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2.0 * x.data + 2.0)

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), grad_enabled=True)
        with Tape() as tape:
            out = T.mul(x, x)
        with pytest.raises(ShapeError):
            tape.backward(out)

    def test_second_backward_rejected(self):
        x = Tensor([[1.0]], grad_enabled=True)
        with Tape() as tape:
            loss = T.sum_all(x)
        tape.backward(loss)
        with pytest.raises(RuntimeError, match="fresh tape"):
            tape.backward(loss)

    def test_unreached_leaf_gets_zero_grad(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), grad_enabled=True)
        y = Tensor(rng.normal(size=(2, 2)), grad_enabled=True)
        with Tape() as tape:
            T.mul(y, y)  # recorded but not part of the loss
            loss = T.sum_all(x)
        tape.backward(loss)
        np.testing.assert_array_equal(y.grad, np.zeros((2, 2)))

    def test_backward_returns_leaf_map(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), grad_enabled=True)
        with Tape() as tape:
            loss = T.sum_all(T.scale(x, 3.0))
        grads = tape.backward(loss)
        assert grads[x] is x.grad

    def test_ops_without_tape_do_not_record(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), grad_enabled=True)
        out = T.mul(x, x)
        assert out.grad_enabled is False
