import math

import numpy as np
import pytest

from mnagt import ShapeError, Tensor
from mnagt.oracle import (
    DenseMatrix,
    dense_power_propagate,
    naive_attention,
    numerical_gradient,
)
from mnagt.verify import array_from_dense, dense_from_array


def test_dense_matrix_roundtrip():
    m = DenseMatrix.from_rows([[1.0, 2.0], [3.0, 4.0]])
    assert m.get(1, 0) == 3.0
    m.set(1, 0, 9.0)
    assert m.to_rows() == [[1.0, 2.0], [9.0, 4.0]]


def test_dense_matrix_size_mismatch():
    with pytest.raises(ShapeError):
        DenseMatrix(2, 2, [1.0, 2.0, 3.0])


def test_matmul_hand_value():
    a = DenseMatrix.from_rows([[1.0, 2.0], [3.0, 4.0]])
    b = DenseMatrix.from_rows([[5.0], [6.0]])
    assert a.matmul(b).to_rows() == [[17.0], [39.0]]


def test_propagate_k0_is_identity():
    a = DenseMatrix.from_rows([[0.5, 0.5], [0.5, 0.5]])
    h = DenseMatrix.from_rows([[1.0], [2.0]])
    assert dense_power_propagate(a, h, 0).to_rows() == h.to_rows()


def test_propagate_k1_hand_value():
    a = DenseMatrix.from_rows([[0.0, 1.0], [1.0, 0.0]])
    h = DenseMatrix.from_rows([[1.0, 2.0], [3.0, 4.0]])
    assert dense_power_propagate(a, h, 1).to_rows() == [[3.0, 4.0], [1.0, 2.0]]


def test_naive_attention_single_row_returns_value():
    q = DenseMatrix.from_rows([[2.0, -1.0]])
    k = DenseMatrix.from_rows([[0.3, 0.4]])
    v = DenseMatrix.from_rows([[5.0, 6.0, 7.0]])
    assert naive_attention(q, k, v).to_rows() == [[5.0, 6.0, 7.0]]


def test_naive_attention_uniform_logits_gives_row_mean():
    n = 4
    q = DenseMatrix(n, 2)  # all zeros -> all logits zero
    k = DenseMatrix.from_rows(np.random.default_rng(0).normal(size=(n, 2)))
    v = DenseMatrix.from_rows([[1.0], [2.0], [3.0], [6.0]])
    out = naive_attention(q, k, v)
    for i in range(n):
        assert abs(out.get(i, 0) - 3.0) < 1e-12


def test_numerical_gradient_quadratic():
    theta = Tensor([[3.0]], grad_enabled=True)

    def f():
        return float(theta.data[0, 0] ** 2)

    grads = numerical_gradient(f, [("theta", theta)])
    assert abs(grads["theta"].get(0, 0) - 6.0) < 1e-7
    assert theta.data[0, 0] == 3.0  # restored after perturbation


def test_numerical_gradient_constant_function():
    theta = Tensor([[1.0, -2.0]], grad_enabled=True)
    grads = numerical_gradient(lambda: 42.0, [("theta", theta)])
    assert np.abs(array_from_dense(grads["theta"])).max() < 1e-9


def test_numerical_gradient_rejects_non_finite():
    theta = Tensor([[1.0]], grad_enabled=True)
    with pytest.raises(FloatingPointError):
        numerical_gradient(lambda: math.inf, [("theta", theta)])


def test_dense_conversion_helpers(rng):
    arr = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(array_from_dense(dense_from_array(arr)), arr)
