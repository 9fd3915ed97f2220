"""Finite-difference checks of every layer primitive in isolation (float64,
central differences, h = 1e-5)."""

import numpy as np
import pytest

from roomdiff import layers as L

H = 1e-5
RTOL = 1e-4


def rel(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def fd_check(func, args, grads, rng, coords=40):
    """func(*args) -> scalar; grads[i] matches args[i] (None = skip)."""
    for arg, grad in zip(args, grads):
        if grad is None:
            continue
        for _ in range(coords):
            idx = tuple(int(rng.integers(s)) for s in arg.shape)
            orig = arg[idx]
            arg[idx] = orig + H
            fp = func()
            arg[idx] = orig - H
            fm = func()
            arg[idx] = orig
            numeric = (fp - fm) / (2 * H)
            assert rel(grad[idx], numeric) < RTOL, \
                f"fd mismatch at {idx}: {grad[idx]} vs {numeric}"


def test_linear_gradients():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4, 5))
    w = rng.standard_normal((5, 6))
    b = rng.standard_normal(6)
    probe = rng.standard_normal((3, 4, 6))

    def scalar():
        return float((L.linear_forward(x, w, b)[0] * probe).sum())

    out, cache = L.linear_forward(x, w, b)
    gx, gw, gb = L.linear_backward(probe, cache)
    fd_check(scalar, (x, w, b), (gx, gw, gb), rng)


def test_silu_gradients():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 7)) * 3
    probe = rng.standard_normal((4, 7))

    def scalar():
        return float((L.silu_forward(x)[0] * probe).sum())

    _, cache = L.silu_forward(x)
    gx = L.silu_backward(probe, cache)
    fd_check(scalar, (x,), (gx,), rng)


def test_layer_norm_gradients():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 5, 8))
    g = rng.standard_normal(8) + 1.0
    b = rng.standard_normal(8)
    probe = rng.standard_normal((2, 5, 8))

    def scalar():
        return float((L.layer_norm_forward(x, g, b)[0] * probe).sum())

    _, cache = L.layer_norm_forward(x, g, b)
    gx, gg, gb = L.layer_norm_backward(probe, cache)
    fd_check(scalar, (x, g, b), (gx, gg, gb), rng)


def test_conv1d_gradients():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 6, 4))
    w = rng.standard_normal((3, 4, 5))
    b = rng.standard_normal(5)
    probe = rng.standard_normal((2, 6, 5))

    def scalar():
        return float((L.conv1d_forward(x, w, b)[0] * probe).sum())

    _, cache = L.conv1d_forward(x, w, b)
    gx, gw, gb = L.conv1d_backward(probe, cache)
    fd_check(scalar, (x, w, b), (gx, gw, gb), rng)


def test_conv1d_same_padding_shape():
    x = np.ones((1, 5, 2))
    w = np.zeros((3, 2, 3))
    out, _ = L.conv1d_forward(x, w, np.zeros(3))
    assert out.shape == (1, 5, 3)


def test_conv1d_kernel_one_is_pointwise():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 5, 3))
    w = rng.standard_normal((1, 3, 3))
    out, _ = L.conv1d_forward(x, w, np.zeros(3))
    assert np.allclose(out, x @ w[0])


def test_self_attention_gradients():
    rng = np.random.default_rng(5)
    w = 8
    x = rng.standard_normal((2, 4, w))
    wqkv = rng.standard_normal((w, 3 * w)) * 0.3
    bqkv = rng.standard_normal(3 * w) * 0.1
    wo = rng.standard_normal((w, w)) * 0.3
    bo = rng.standard_normal(w) * 0.1
    probe = rng.standard_normal((2, 4, w))

    def scalar():
        out, _ = L.self_attention_forward(x, wqkv, bqkv, wo, bo, 2)
        return float((out * probe).sum())

    _, cache = L.self_attention_forward(x, wqkv, bqkv, wo, bo, 2)
    gx, gwqkv, gbqkv, gwo, gbo = L.self_attention_backward(probe, cache)
    fd_check(scalar, (x, wqkv, bqkv, wo, bo), (gx, gwqkv, gbqkv, gwo, gbo),
             rng, coords=30)


def test_attention_weights_are_convex():
    rng = np.random.default_rng(6)
    w = 8
    x = rng.standard_normal((3, 5, w))
    wqkv = rng.standard_normal((w, 3 * w))
    out, cache = L.self_attention_forward(
        x, wqkv, np.zeros(3 * w), np.eye(w), np.zeros(w), 2)
    a = cache[4]
    assert np.all(a >= 0)
    assert np.max(np.abs(a.sum(axis=-1) - 1.0)) < 1e-6


def test_cross_attention_gradients_and_mask():
    rng = np.random.default_rng(7)
    w, xd = 8, 6
    x = rng.standard_normal((2, 3, w))
    mem = rng.standard_normal((2, 5, xd))
    valid = np.array([[True, True, True, False, False],
                      [True, True, True, True, True]])
    params = [rng.standard_normal(s) * 0.3 for s in
              [(w, w), (w,), (xd, w), (w,), (xd, w), (w,), (w, w), (w,)]]
    probe = rng.standard_normal((2, 3, w))

    def scalar():
        out, _ = L.cross_attention_forward(x, mem, valid, *params, 2)
        return float((out * probe).sum())

    _, cache = L.cross_attention_forward(x, mem, valid, *params, 2)
    grads = L.cross_attention_backward(probe, cache)
    fd_check(scalar, (x, mem, *params), grads, rng, coords=25)
    # masked memory slots receive exactly zero gradient
    gmem = grads[1]
    assert np.array_equal(gmem[0, 3:], np.zeros((2, xd)))


def test_embedding_gradients():
    rng = np.random.default_rng(8)
    table = rng.standard_normal((7, 4))
    ids = np.array([[1, 2, 2], [0, 6, 1]])
    probe = rng.standard_normal((2, 3, 4))
    out, cache = L.embedding_forward(ids, table)
    assert out.shape == (2, 3, 4)
    gt = L.embedding_backward(probe, cache)
    expected = np.zeros_like(table)
    for b in range(2):
        for s in range(3):
            expected[ids[b, s]] += probe[b, s]
    assert np.allclose(gt, expected)


def test_sinusoidal_embedding_properties():
    emb = L.sinusoidal_embedding(np.array([0.0, 5.0]), 16)
    assert emb.shape == (2, 16)
    assert np.allclose(emb[0, :8], 0.0)   # sin(0)
    assert np.allclose(emb[0, 8:], 1.0)   # cos(0)
    again = L.sinusoidal_embedding(np.array([0.0, 5.0]), 16)
    assert np.array_equal(emb, again)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(9)
    a = L.softmax_forward(rng.standard_normal((4, 6)) * 10)
    assert np.allclose(a.sum(-1), 1.0, atol=1e-12)
    with pytest.raises(Exception):
        L.softmax_forward(None)
