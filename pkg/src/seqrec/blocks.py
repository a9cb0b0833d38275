"""Transformer building blocks as explicit forward/backward pairs.

Everything operates on float64 batches shaped (B, L, D). Each forward returns
(output, cache); the matching backward consumes the cache and the upstream
gradient and returns input/parameter gradients. Masking uses additive -inf
biases, so disallowed attention weights are exactly zero and causality holds
bit-for-bit, not approximately.
"""
from __future__ import annotations

import math

import numpy as np

NEG_INF = -np.inf


def causal_mask(L: int) -> np.ndarray:
    """Boolean (L, L) matrix; entry (t, j) is True iff position t may attend to j <= t."""
    if L < 1:
        raise ValueError("L must be >= 1")
    return np.tril(np.ones((L, L), dtype=bool))


def attention_bias(valid: np.ndarray, causal: bool) -> np.ndarray:
    """Additive (B, 1, L, L) bias: 0 where attention is allowed, -inf elsewhere.

    Padding positions are never attended; with causal=True position t also
    cannot see any j > t. Every row keeps at least one allowed entry as long as
    each sequence has at least one valid token at position 0.
    """
    b, l = valid.shape
    allowed = np.broadcast_to(valid[:, None, :], (b, l, l)).copy()
    if causal:
        allowed &= causal_mask(l)[None, :, :]
    bias = np.where(allowed, 0.0, NEG_INF)
    return bias[:, None, :, :]


def masked_softmax(scores: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis where -inf rows entries become exact zeros."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, l, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dk)


def mha_forward(x, wq, wk, wv, wo, n_heads: int, bias):
    """Multi-head attention: softmax(Q K^T / sqrt(d_k) + bias) V, concat, project."""
    d_k = x.shape[-1] // n_heads
    q = _split_heads(x @ wq, n_heads)
    k = _split_heads(x @ wk, n_heads)
    v = _split_heads(x @ wv, n_heads)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(d_k) + bias
    attn = masked_softmax(scores)
    ctx = _merge_heads(attn @ v)
    out = ctx @ wo
    cache = dict(x=x, q=q, k=k, v=v, attn=attn, ctx=ctx,
                 wq=wq, wk=wk, wv=wv, wo=wo, n_heads=n_heads, d_k=d_k)
    return out, cache


def mha_backward(cache, d_out):
    x, attn = cache["x"], cache["attn"]
    n_heads, d_k = cache["n_heads"], cache["d_k"]
    b, l, d = x.shape

    d_wo = cache["ctx"].reshape(-1, d).T @ d_out.reshape(-1, d)
    d_ctx = _split_heads(d_out @ cache["wo"].T, n_heads)

    d_attn = d_ctx @ cache["v"].transpose(0, 1, 3, 2)
    d_v = attn.transpose(0, 1, 3, 2) @ d_ctx
    # softmax backward; masked entries have attn == 0, so their grads vanish
    d_scores = attn * (d_attn - np.sum(d_attn * attn, axis=-1, keepdims=True))
    d_scores /= math.sqrt(d_k)
    d_q = d_scores @ cache["k"]
    d_k_ = d_scores.transpose(0, 1, 3, 2) @ cache["q"]

    dq_m, dk_m, dv_m = _merge_heads(d_q), _merge_heads(d_k_), _merge_heads(d_v)
    x_flat = x.reshape(-1, d)
    d_wq = x_flat.T @ dq_m.reshape(-1, d)
    d_wk = x_flat.T @ dk_m.reshape(-1, d)
    d_wv = x_flat.T @ dv_m.reshape(-1, d)
    d_x = dq_m @ cache["wq"].T + dk_m @ cache["wk"].T + dv_m @ cache["wv"].T
    return d_x, d_wq, d_wk, d_wv, d_wo


def ffn_forward(x, w1, b1, w2, b2):
    """Position-wise max(0, x W1 + b1) W2 + b2."""
    pre = x @ w1 + b1
    act = np.maximum(pre, 0.0)
    out = act @ w2 + b2
    return out, dict(x=x, pre=pre, act=act, w1=w1, w2=w2)


def ffn_backward(cache, d_out):
    x, act = cache["x"], cache["act"]
    d_in = x.shape[-1]
    d_ff = act.shape[-1]
    d_w2 = act.reshape(-1, d_ff).T @ d_out.reshape(-1, d_out.shape[-1])
    d_b2 = d_out.reshape(-1, d_out.shape[-1]).sum(axis=0)
    d_act = (d_out @ cache["w2"].T) * (cache["pre"] > 0)
    d_w1 = x.reshape(-1, d_in).T @ d_act.reshape(-1, d_ff)
    d_b1 = d_act.reshape(-1, d_ff).sum(axis=0)
    d_x = d_act @ cache["w1"].T
    return d_x, d_w1, d_b1, d_w2, d_b2


LN_EPS = 1e-5


def layer_norm_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    out = xhat * gamma + beta
    return out, dict(xhat=xhat, inv=inv, gamma=gamma)


def layer_norm_backward(cache, d_out):
    xhat, inv, gamma = cache["xhat"], cache["inv"], cache["gamma"]
    d = xhat.shape[-1]
    d_gamma = np.sum(d_out * xhat, axis=tuple(range(d_out.ndim - 1)))
    d_beta = np.sum(d_out, axis=tuple(range(d_out.ndim - 1)))
    d_xhat = d_out * gamma
    d_x = inv * (d_xhat
                 - d_xhat.mean(axis=-1, keepdims=True)
                 - xhat * np.mean(d_xhat * xhat, axis=-1, keepdims=True))
    return d_x, d_gamma, d_beta


def dropout_forward(x, rate: float, rng: np.random.Generator | None):
    """Inverted dropout; identity when rate == 0 or rng is None (eval mode)."""
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(mask, d_out):
    return d_out if mask is None else d_out * mask


def l2_normalize(v: np.ndarray):
    """Row-normalize (B, D); returns (unit, norms). Zero rows are rejected."""
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise FloatingPointError("cannot L2-normalize a zero vector")
    return v / norms, norms


def l2_normalize_backward(unit, norms, d_unit):
    return (d_unit - unit * np.sum(unit * d_unit, axis=-1, keepdims=True)) / norms
