"""Gradient and value oracles for the reverse-mode autodiff engine.

Every op is checked against central finite differences; values are checked
against independent numpy computations.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import clindistill.autodiff as ad
from clindistill.autodiff import (Tensor, backward, concat, cross_entropy,
                                  embedding, layer_norm, matmul, softmax)
from _gradcheck import check_tensor_grad


def _t(shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


# ---- value oracles -----------------------------------------------------------


def test_matmul_matches_naive_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    want = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    got = matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = _t((4, 7), seed=1, scale=3.0)
    s = softmax(x).data
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(4), atol=1e-12)
    shifted = softmax(Tensor(x.data + 1000.0)).data
    np.testing.assert_allclose(s, shifted, atol=1e-12)


def test_cross_entropy_uniform_logits_is_log_vocab():
    logits = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    targets = np.array([[1, 2, 3], [2, 1, 0]])  # one PAD position
    loss = cross_entropy(logits, targets, pad_id=0)
    assert loss.data == pytest.approx(math.log(4.0), abs=1e-12)


def test_cross_entropy_ignores_pad_positions():
    rng = np.random.default_rng(2)
    logits_np = rng.normal(size=(1, 4, 5))
    targets_full = np.array([[1, 2, 0, 0]])
    targets_short = np.array([[1, 2]])
    full = cross_entropy(Tensor(logits_np), targets_full, pad_id=0).data
    short = cross_entropy(Tensor(logits_np[:, :2]), targets_short, pad_id=0).data
    assert full == pytest.approx(short, rel=1e-12)


def test_layer_norm_output_is_standardized():
    x = _t((3, 6), seed=3, scale=2.0)
    gain = Tensor(np.ones(6), requires_grad=True)
    bias = Tensor(np.zeros(6), requires_grad=True)
    y = layer_norm(x, gain, bias).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-4)


def test_embedding_selects_rows():
    table = _t((5, 3), seed=4)
    ids = np.array([[0, 4], [2, 2]])
    out = embedding(table, ids).data
    np.testing.assert_array_equal(out, table.data[ids])


def test_concat_matches_numpy():
    a, b = _t((2, 3), 5), _t((2, 4), 6)
    got = concat([a, b], axis=1).data
    np.testing.assert_array_equal(got, np.concatenate([a.data, b.data], axis=1))


def test_no_grad_blocks_graph_building():
    x = _t((2, 2), 7)
    with ad.no_grad():
        y = x * x
    assert not y.requires_grad


# ---- gradient oracles (central finite differences) ----------------------------


def test_grad_add_mul_sub():
    a, b = _t((3, 4), 10), _t((3, 4), 11)
    check_tensor_grad(lambda: ((a + b) * a - b).sum(), {"a": a, "b": b},
                      max_coords=12)


def test_grad_broadcast_add():
    a, b = _t((3, 4), 12), _t((4,), 13)
    check_tensor_grad(lambda: ((a + b) * (a + b)).sum(), {"a": a, "b": b},
                      max_coords=12)


def test_grad_matmul():
    a, b = _t((3, 4), 14), _t((4, 5), 15)
    check_tensor_grad(lambda: matmul(a, b).sum(), {"a": a, "b": b},
                      max_coords=12)


def test_grad_batched_matmul():
    a, b = _t((2, 3, 4), 16), _t((2, 4, 5), 17)
    check_tensor_grad(lambda: (matmul(a, b) * matmul(a, b)).sum(),
                      {"a": a, "b": b}, max_coords=12)


def test_grad_reshape_swapaxes():
    a = _t((2, 3, 4), 18)
    check_tensor_grad(
        lambda: (a.swapaxes(1, 2).reshape((2, 12)) * a.swapaxes(1, 2).reshape((2, 12))).sum(),
        {"a": a}, max_coords=12)


def test_grad_relu_tanh():
    a = _t((3, 5), 19)
    check_tensor_grad(lambda: (a.relu() * a.tanh()).sum(), {"a": a},
                      max_coords=12)


def test_grad_mean_sum_axis():
    a = _t((3, 5), 20)
    check_tensor_grad(lambda: (a.sum(axis=1) * a.sum(axis=1)).mean(),
                      {"a": a}, max_coords=12)


def test_grad_softmax():
    a = _t((3, 5), 21)
    w = _t((3, 5), 22)
    check_tensor_grad(lambda: (softmax(a) * w).sum(), {"a": a, "w": w},
                      max_coords=12)


def test_grad_layer_norm():
    x, g, b = _t((3, 6), 23), _t((6,), 24), _t((6,), 25)
    check_tensor_grad(lambda: (layer_norm(x, g, b) * layer_norm(x, g, b)).sum(),
                      {"x": x, "gain": g, "bias": b}, max_coords=12)


def test_grad_cross_entropy():
    logits = _t((2, 4, 6), 26)
    targets = np.array([[1, 3, 5, 0], [2, 4, 0, 0]])
    check_tensor_grad(lambda: cross_entropy(logits, targets, pad_id=0),
                      {"logits": logits}, max_coords=16)


def test_grad_embedding():
    table = _t((7, 4), 27)
    ids = np.array([[0, 3, 3], [6, 1, 0]])
    check_tensor_grad(lambda: (embedding(table, ids) * embedding(table, ids)).sum(),
                      {"table": table}, max_coords=16)


def test_grad_concat():
    a, b = _t((2, 3), 28), _t((2, 5), 29)
    check_tensor_grad(lambda: (concat([a, b], axis=1) * concat([a, b], axis=1)).sum(),
                      {"a": a, "b": b}, max_coords=12)


# ---- properties ---------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=5), st.integers(min_value=1, max_value=5),
       st.integers(min_value=0, max_value=10_000))
def test_matmul_matches_numpy_property(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, m)), rng.normal(size=(m, n))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b,
                               rtol=1e-10, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_sum_of_gradients_of_sum_is_ones(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
