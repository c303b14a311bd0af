"""Tape mechanics, backward accumulation, and the finite-difference oracle."""

import numpy as np
import pytest

from refseg import autodiff as ad
from refseg.autodiff import Tape, Tensor, backward
from refseg.errors import DimensionError
from refseg.gradcheck import grad_check
from refseg.nn import MultiHeadAttention, ParamStore


def randn_param(store, name, shape, rng):
    return store.parameter(name, shape, lambda r, s, d: rng.standard_normal(s).astype(d))


def test_backward_sum_of_matmul_outer_product_oracle(rng):
    store = ParamStore(dtype=np.float64, seed=0)
    w = randn_param(store, "w", (3, 4), rng)
    x = Tensor(rng.standard_normal((4, 5)))
    with Tape() as tape:
        loss = ad.tsum(ad.matmul(w.value, x))
    backward(tape, loss)
    # d/dW sum(Wx) = ones(3,5) @ x^T: every row is the row-sums of x
    expected = np.tile(x.data.sum(axis=1), (3, 1))
    assert np.allclose(w.gradient, expected)


def test_unreachable_parameter_has_zero_gradient(rng):
    store = ParamStore(dtype=np.float64, seed=0)
    w = randn_param(store, "w", (3, 3), rng)
    unused = randn_param(store, "unused", (2, 2), rng)
    with Tape() as tape:
        loss = ad.tsum(w.value)
    backward(tape, loss)
    assert np.array_equal(unused.gradient, np.zeros((2, 2)))


def test_backward_rejects_non_scalar(rng):
    with Tape() as tape:
        out = ad.relu(Tensor(rng.standard_normal((2, 2))))
    with pytest.raises(DimensionError):
        backward(tape, out)


def test_relu_matmul_chain_matches_finite_differences(rng):
    store = ParamStore(dtype=np.float64, seed=0)
    w1 = randn_param(store, "w1", (4, 6), rng)
    w2 = randn_param(store, "w2", (6, 2), rng)
    x = Tensor(rng.standard_normal((3, 4)))

    def f():
        return ad.tsum(ad.matmul(ad.relu(ad.matmul(x, w1.value)), w2.value))

    assert grad_check(f, [w1, w2], eps=1e-5) < 1e-6


def test_tensor_reused_twice_accumulates(rng):
    store = ParamStore(dtype=np.float64, seed=0)
    w = randn_param(store, "w", (3, 3), rng)
    with Tape() as tape:
        y = ad.add(ad.relu(w.value), ad.relu(w.value))
        loss = ad.tsum(y)
    backward(tape, loss)
    assert np.allclose(w.gradient, 2.0 * (w.value.data > 0))


def test_no_recording_without_tape(rng):
    t = Tape()
    out = ad.matmul(Tensor(np.eye(2)), Tensor(np.ones((2, 2))))
    assert len(t) == 0
    assert out.grad is None


def test_gradcheck_linear_function_tiny_error(rng):
    store = ParamStore(dtype=np.float64, seed=0)
    w = randn_param(store, "w", (4, 4), rng)
    proj = Tensor(rng.standard_normal((4, 4)))
    err = grad_check(lambda: ad.tsum(ad.mul(w.value, proj)), [w])
    assert err < 1e-9


def test_gradcheck_constant_function_both_zero(rng):
    store = ParamStore(dtype=np.float64, seed=0)
    w = randn_param(store, "w", (3, 2), rng)
    c = Tensor(np.ones(1))
    err = grad_check(lambda: ad.tsum(c), [w])
    assert err == 0.0


def test_mhsa_single_row_attention_weight_is_one(rng):
    store = ParamStore(dtype=np.float64, seed=4)
    attn = MultiHeadAttention(store, "attn", 8, 2)
    x = Tensor(rng.standard_normal((1, 8)))
    out = attn(x)
    assert out.shape == (1, 8)
    assert np.allclose(attn.last_weights, 1.0)
    # with weight exactly one the block reduces to out_proj(v_proj(x))
    v = x.data @ attn.wv.value.data + attn.bv.value.data
    expected = v @ attn.wo.value.data + attn.bo.value.data
    assert np.allclose(out.data, expected)


def test_mhsa_row_permutation_equivariance(rng):
    store = ParamStore(dtype=np.float64, seed=5)
    attn = MultiHeadAttention(store, "attn", 8, 4)
    x = rng.standard_normal((5, 8))
    perm = np.array([2, 0, 4, 1, 3])
    y = attn(Tensor(x)).data
    y_perm = attn(Tensor(x[perm])).data
    assert np.abs(y[perm] - y_perm).max() < 1e-6


def test_mhsa_gradcheck(rng):
    store = ParamStore(dtype=np.float64, seed=6)
    attn = MultiHeadAttention(store, "attn", 6, 3)
    x = randn_param(store, "x", (4, 6), rng)
    proj = Tensor(rng.standard_normal((4, 6)))
    err = grad_check(lambda: ad.tsum(ad.mul(attn(x.value), proj)), store.parameters())
    assert err < 1e-4
