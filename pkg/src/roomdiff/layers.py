"""Differentiable layer primitives with explicit reverse-mode gradients.

Every layer is a pair of pure functions: `*_forward` returns (output, cache)
and `*_backward` consumes (grad_output, cache) and returns gradients for
each input and parameter, in the forward argument order. No global state;
dtype follows the inputs, so the same code runs in float32 for training and
float64 for finite-difference audits.

Feature tensors are (B, N, W): batch, object slot, channel. Convolutions
run along the object axis with zero padding.
"""

from __future__ import annotations

import math

import numpy as np

MASK_FILL = -1e9  # additive logit mask; exp underflows to exactly 0


def linear_forward(x, w, b):
    out = x @ w + b
    return out, (x, w)


def linear_backward(g, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    gw = x2.T @ g2
    gb = g2.sum(axis=0)
    gx = g @ w.T
    return gx, gw, gb


def silu_forward(x):
    # clip keeps exp() in range for float32; sigmoid is saturated out there
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
    return x * s, (x, s)


def silu_backward(g, cache):
    x, s = cache
    return g * (s * (1.0 + x * (1.0 - s)))


def layer_norm_forward(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(g, cache):
    xhat, inv, gain = cache
    ggain = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    gbias = g.reshape(-1, g.shape[-1]).sum(axis=0)
    gh = g * gain
    m1 = gh.mean(axis=-1, keepdims=True)
    m2 = (gh * xhat).mean(axis=-1, keepdims=True)
    gx = inv * (gh - m1 - xhat * m2)
    return gx, ggain, gbias


def conv1d_forward(x, w, b):
    """Same-padded convolution along axis -2; w has shape (K, C_in, C_out)."""
    k = w.shape[0]
    half = k // 2
    n = x.shape[-2]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (half, half)
    xp = np.pad(x, pad)
    out = np.zeros(x.shape[:-1] + (w.shape[2],), dtype=x.dtype)
    for j in range(k):
        out += xp[..., j:j + n, :] @ w[j]
    out += b
    return out, (xp, w, n)


def conv1d_backward(g, cache):
    xp, w, n = cache
    k = w.shape[0]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    x2last = xp.shape[-1]
    g2 = g.reshape(-1, g.shape[-1])
    for j in range(k):
        xj = xp[..., j:j + n, :].reshape(-1, x2last)
        gw[j] = xj.T @ g2
        gxp[..., j:j + n, :] += g @ w[j].T
    gb = g2.sum(axis=0)
    half = k // 2
    gx = gxp[..., half:half + n, :]
    return gx, gw, gb


def softmax_forward(logits):
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    a = e / e.sum(axis=-1, keepdims=True)
    return a


def softmax_backward(g, a):
    dot = (g * a).sum(axis=-1, keepdims=True)
    return a * (g - dot)


def _split_heads(x, heads):
    b, n, w = x.shape
    return x.reshape(b, n, heads, w // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * hd)


def self_attention_forward(x, wqkv, bqkv, wo, bo, heads):
    """Multi-head attention over the object axis; rows attend to all rows."""
    w = x.shape[-1]
    hd = w // heads
    qkv, lin_cache = linear_forward(x, wqkv, bqkv)
    q = _split_heads(qkv[..., :w], heads)
    k = _split_heads(qkv[..., w:2 * w], heads)
    v = _split_heads(qkv[..., 2 * w:], heads)
    scale = 1.0 / math.sqrt(hd)
    logits = (q @ k.transpose(0, 1, 3, 2)) * scale
    a = softmax_forward(logits)
    ctx = _merge_heads(a @ v)
    out, out_cache = linear_forward(ctx, wo, bo)
    return out, (lin_cache, q, k, v, a, scale, out_cache, heads)


def self_attention_backward(g, cache):
    lin_cache, q, k, v, a, scale, out_cache, heads = cache
    gctx, gwo, gbo = linear_backward(g, out_cache)
    gctx_h = _split_heads(gctx, heads)
    ga = gctx_h @ v.transpose(0, 1, 3, 2)
    gv = a.transpose(0, 1, 3, 2) @ gctx_h
    glog = softmax_backward(ga, a)
    gq = (glog @ k) * scale
    gk = (glog.transpose(0, 1, 3, 2) @ q) * scale
    gqkv = np.concatenate(
        [_merge_heads(gq), _merge_heads(gk), _merge_heads(gv)], axis=-1)
    gx, gwqkv, gbqkv = linear_backward(gqkv, lin_cache)
    return gx, gwqkv, gbqkv, gwo, gbo


def cross_attention_forward(x, mem, valid, wq, bq, wk, bk, wv, bv, wo, bo,
                            heads):
    """Object features attend to memory tokens; `valid` is a (B, S) key mask."""
    w = x.shape[-1]
    hd = w // heads
    q_full, q_cache = linear_forward(x, wq, bq)
    k_full, k_cache = linear_forward(mem, wk, bk)
    v_full, v_cache = linear_forward(mem, wv, bv)
    q = _split_heads(q_full, heads)
    k = _split_heads(k_full, heads)
    v = _split_heads(v_full, heads)
    scale = 1.0 / math.sqrt(hd)
    logits = (q @ k.transpose(0, 1, 3, 2)) * scale
    if valid is not None:
        fill = np.where(valid, 0.0, MASK_FILL).astype(logits.dtype)
        logits = logits + fill[:, None, None, :]
    a = softmax_forward(logits)
    ctx = _merge_heads(a @ v)
    out, out_cache = linear_forward(ctx, wo, bo)
    return out, (q_cache, k_cache, v_cache, q, k, v, a, scale, out_cache,
                 heads)


def cross_attention_backward(g, cache):
    q_cache, k_cache, v_cache, q, k, v, a, scale, out_cache, heads = cache
    gctx, gwo, gbo = linear_backward(g, out_cache)
    gctx_h = _split_heads(gctx, heads)
    ga = gctx_h @ v.transpose(0, 1, 3, 2)
    gv = a.transpose(0, 1, 3, 2) @ gctx_h
    glog = softmax_backward(ga, a)
    gq = (glog @ k) * scale
    gk = (glog.transpose(0, 1, 3, 2) @ q) * scale
    gx, gwq, gbq = linear_backward(_merge_heads(gq), q_cache)
    gmem_k, gwk, gbk = linear_backward(_merge_heads(gk), k_cache)
    gmem_v, gwv, gbv = linear_backward(_merge_heads(gv), v_cache)
    gmem = gmem_k + gmem_v
    return gx, gmem, gwq, gbq, gwk, gbk, gwv, gbv, gwo, gbo


def embedding_forward(ids, table):
    return table[ids], (ids, table.shape)


def embedding_backward(g, cache):
    ids, shape = cache
    gt = np.zeros(shape, dtype=g.dtype)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
    return gt


def sinusoidal_embedding(t, dim, dtype=np.float64):
    """Fixed sin/cos features of the diffusion step; `dim` must be even."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    return emb.astype(dtype)
