"""Causal-masked transformer user tower over fixed post embeddings.

Input tokens are assembled from pre-trained post vectors plus learned
position / action / surface embeddings and a relative-time feature; a learned
CLS token at position 0 provides the cold-start representation. The stack is
post-norm (residual, then layer norm). All math is float64 with hand-written
backward passes; gradients of every parameter are checked against finite
differences in the test suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .actions import ACTION_VOCAB_SIZE, NULL_ACTION_ID
from .blocks import (
    attention_bias,
    causal_mask,
    dropout_backward,
    dropout_forward,
    ffn_backward,
    ffn_forward,
    l2_normalize,
    l2_normalize_backward,
    layer_norm_backward,
    layer_norm_forward,
    mha_backward,
    mha_forward,
)
from . import tensorio
from .configs import EncoderConfig

__all__ = [
    "SequenceInput", "init_params", "assemble_input", "assemble_batch_inputs",
    "encode_batch", "backward_batch", "encode_sequence", "encode_user_vectors",
    "causal_mask", "save_checkpoint", "load_checkpoint", "quantize_params",
]

NULL_SURFACE_ID_OFFSET = 0  # null surface id == n_surfaces (last table row)
# The raw relative-time feature log1p(seconds) sits around 9-14.5 while unit
# embedding coordinates are ~1/sqrt(d); the projection input is prescaled so
# one week maps to 1.0 and gradients through time_w stay balanced.
TIME_LOG_SCALE = math.log1p(7 * 86400.0)


def layer_key(i: int, name: str) -> str:
    return f"layers.{i}.{name}"


def init_params(config: EncoderConfig, seed: int) -> dict:
    """Fresh parameter dict. Weight matrices ~ N(0, 2/(fan_in+fan_out)); tables ~ N(0, 0.02^2)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    d, f = config.d_model, config.d_ff

    def xavier(n_in, n_out):
        return rng.normal(0.0, math.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))

    params: dict[str, np.ndarray] = {
        "pos_table": rng.normal(0.0, 0.02, size=(config.max_seq_len + 1, d)),
        "action_table": rng.normal(0.0, 0.02, size=(ACTION_VOCAB_SIZE, d)),
        "surface_table": rng.normal(0.0, 0.02, size=(config.n_surfaces + 1, d)),
        "cls": rng.normal(0.0, 0.02, size=d),
        "time_w": xavier(d + 1, d),
        "time_b": np.zeros(d),
    }
    for i in range(config.n_layers):
        params[layer_key(i, "wq")] = xavier(d, d)
        params[layer_key(i, "wk")] = xavier(d, d)
        params[layer_key(i, "wv")] = xavier(d, d)
        params[layer_key(i, "wo")] = xavier(d, d)
        params[layer_key(i, "ffn_w1")] = xavier(d, f)
        params[layer_key(i, "ffn_b1")] = np.zeros(f)
        params[layer_key(i, "ffn_w2")] = xavier(f, d)
        params[layer_key(i, "ffn_b2")] = np.zeros(d)
        params[layer_key(i, "ln1_g")] = np.ones(d)
        params[layer_key(i, "ln1_b")] = np.zeros(d)
        params[layer_key(i, "ln2_g")] = np.ones(d)
        params[layer_key(i, "ln2_b")] = np.zeros(d)
    if config.pooling == "attention":
        params["pool_w"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=d)
    return params


@dataclass(eq=False)
class SequenceInput:
    """Assembled single-sequence input (position 0 is CLS when enabled)."""

    token_vectors: np.ndarray      # (L', d_model)
    position_ids: np.ndarray       # (L',)
    action_ids: np.ndarray         # (L',)
    surface_ids: np.ndarray        # (L',)
    rel_time: np.ndarray           # (L',) log(1 + cutoff - ts), 0 for CLS
    pad_mask: np.ndarray           # (L',) bool, True = real token


@dataclass(eq=False)
class BatchAssembly:
    """Batched token grid plus everything the backward pass needs to reach the tables."""

    tokens: np.ndarray             # (B, L, d)
    valid: np.ndarray              # (B, L) bool
    lengths: np.ndarray            # (B,) token counts
    is_real: np.ndarray            # (B, L) bool: real post tokens
    is_cls: np.ndarray             # (B, L) bool
    pos_ids: np.ndarray            # (B, L)
    act_ids: np.ndarray            # (B, L)
    surf_ids: np.ndarray           # (B, L)
    tp_in: np.ndarray              # (B, L, d+1) inputs of the time projection


def _surface_index(config: EncoderConfig, surfaces: dict, name: str | None) -> int:
    if name is None:
        return config.n_surfaces
    return surfaces.get(name, config.n_surfaces)


def assemble_batch_inputs(samples: list, embeddings, params: dict, config: EncoderConfig,
                   surfaces: dict | None = None) -> BatchAssembly:
    """Build the (B, L, d) input grid for a list of SequenceSamples.

    Histories longer than max_seq_len keep their most recent events. Shorter
    ones are padded on the right in the mask only; pad positions are never
    attended and carry zero vectors.
    """
    surfaces = surfaces or {}
    d = config.d_model
    cls_extra = 1 if config.use_cls else 0
    hists = [s.history[-config.max_seq_len:] for s in samples]
    lengths = np.array([len(h) + cls_extra for h in hists], dtype=np.int64)
    if np.any(lengths == 0):
        bad = [samples[i].user_id for i in np.nonzero(lengths == 0)[0]]
        raise ValueError(f"empty history without CLS for users {bad}")
    L = int(lengths.max())
    B = len(samples)

    emb = np.zeros((B, L, d))
    rel = np.zeros((B, L))
    pos_ids = np.zeros((B, L), dtype=np.int64)
    act_ids = np.full((B, L), NULL_ACTION_ID, dtype=np.int64)
    surf_ids = np.full((B, L), config.n_surfaces, dtype=np.int64)
    is_real = np.zeros((B, L), dtype=bool)
    is_cls = np.zeros((B, L), dtype=bool)

    for b, (sample, hist) in enumerate(zip(samples, hists)):
        if hist:
            emb[b, cls_extra:cls_extra + len(hist)] = embeddings.gather(
                [h.post_id for h in hist])
        for t, h in enumerate(hist):
            col = t + cls_extra
            pos_ids[b, col] = col
            act_ids[b, col] = h.action_id
            surf_ids[b, col] = _surface_index(config, surfaces, h.surface)
            is_real[b, col] = True
            if config.use_time:
                delta = sample.cutoff_time - h.ts
                if delta < 0:
                    raise ValueError(f"user {sample.user_id}: event after cutoff")
                rel[b, col] = math.log1p(float(delta))
        if config.use_cls:
            is_cls[b, 0] = True

    tp_in = np.concatenate([emb, rel[:, :, None] / TIME_LOG_SCALE], axis=2)
    time_out = tp_in @ params["time_w"] + params["time_b"]
    tokens = np.where(is_real[:, :, None],
                      time_out
                      + params["pos_table"][pos_ids]
                      + params["action_table"][act_ids]
                      + params["surface_table"][surf_ids],
                      0.0)
    if config.use_cls:
        tokens[:, 0, :] = params["cls"] + params["pos_table"][0]
    valid = is_real | is_cls
    return BatchAssembly(tokens=tokens, valid=valid, lengths=lengths,
                         is_real=is_real, is_cls=is_cls, pos_ids=pos_ids,
                         act_ids=act_ids, surf_ids=surf_ids, tp_in=tp_in)


def assembly_backward(asm: BatchAssembly, d_tokens: np.ndarray, grads: dict) -> None:
    """Scatter token gradients into the embedding tables and the time projection."""
    d_real = np.where(asm.is_real[:, :, None], d_tokens, 0.0)
    flat_mask = asm.is_real.reshape(-1)
    d_flat = d_real.reshape(-1, d_real.shape[-1])[flat_mask]
    tp_flat = asm.tp_in.reshape(-1, asm.tp_in.shape[-1])[flat_mask]
    grads["time_w"] += tp_flat.T @ d_flat
    grads["time_b"] += d_flat.sum(axis=0)
    np.add.at(grads["pos_table"], asm.pos_ids.reshape(-1)[flat_mask], d_flat)
    np.add.at(grads["action_table"], asm.act_ids.reshape(-1)[flat_mask], d_flat)
    np.add.at(grads["surface_table"], asm.surf_ids.reshape(-1)[flat_mask], d_flat)
    if asm.is_cls.any():
        d_cls = d_tokens[asm.is_cls].sum(axis=0)
        grads["cls"] += d_cls
        grads["pos_table"][0] += d_cls


def assemble_input(sample, embeddings, params: dict, config: EncoderConfig,
                   surfaces: dict | None = None) -> SequenceInput:
    """Single-sample input assembly (CLS at position 0, action/surface null ids)."""
    asm = assemble_batch_inputs([sample], embeddings, params, config, surfaces)
    L = int(asm.lengths[0])
    rel = asm.tp_in[0, :L, -1] * TIME_LOG_SCALE
    return SequenceInput(
        token_vectors=asm.tokens[0, :L],
        position_ids=asm.pos_ids[0, :L],
        action_ids=asm.act_ids[0, :L],
        surface_ids=asm.surf_ids[0, :L],
        rel_time=rel,
        pad_mask=asm.valid[0, :L],
    )


def encode_batch(asm: BatchAssembly, params: dict, config: EncoderConfig,
                 train: bool = False, rng: np.random.Generator | None = None):
    """Run the encoder stack; returns (hidden (B,L,d), user_vec (B,d), cache).

    user_vec is the pooled, L2-normalized sequence representation. Dropout is
    active only when train=True and an rng is supplied.
    """
    drop_rng = rng if train else None
    rate = config.dropout if train else 0.0
    bias = attention_bias(asm.valid, config.causal)

    x, in_mask = dropout_forward(asm.tokens, rate, drop_rng)
    layer_caches = []
    for i in range(config.n_layers):
        attn_out, attn_cache = mha_forward(
            x, params[layer_key(i, "wq")], params[layer_key(i, "wk")],
            params[layer_key(i, "wv")], params[layer_key(i, "wo")],
            config.n_heads, bias)
        attn_out, m1 = dropout_forward(attn_out, rate, drop_rng)
        ln1_in = x + attn_out
        h1, ln1_cache = layer_norm_forward(
            ln1_in, params[layer_key(i, "ln1_g")], params[layer_key(i, "ln1_b")])
        ffn_out, ffn_cache = ffn_forward(
            h1, params[layer_key(i, "ffn_w1")], params[layer_key(i, "ffn_b1")],
            params[layer_key(i, "ffn_w2")], params[layer_key(i, "ffn_b2")])
        ffn_out, m2 = dropout_forward(ffn_out, rate, drop_rng)
        h2, ln2_cache = layer_norm_forward(
            h1 + ffn_out, params[layer_key(i, "ln2_g")], params[layer_key(i, "ln2_b")])
        layer_caches.append((attn_cache, m1, ln1_cache, ffn_cache, m2, ln2_cache))
        x = h2
    hidden = x

    pooled, pool_cache = _pool_forward(hidden, asm, params, config)
    user_vec, norms = l2_normalize(pooled)
    cache = dict(asm=asm, in_mask=in_mask, layers=layer_caches,
                 pool=pool_cache, pooled=pooled, user_vec=user_vec, norms=norms)
    return hidden, user_vec, cache


def _pool_forward(hidden, asm: BatchAssembly, params, config: EncoderConfig):
    validf = asm.valid.astype(np.float64)
    if config.pooling == "last":
        idx = asm.lengths - 1
        pooled = hidden[np.arange(hidden.shape[0]), idx]
        return pooled, dict(kind="last", idx=idx)
    if config.pooling in ("mean", "sum"):
        total = (hidden * validf[:, :, None]).sum(axis=1)
        if config.pooling == "sum":
            return total, dict(kind="sum", validf=validf)
        counts = validf.sum(axis=1, keepdims=True)
        return total / counts, dict(kind="mean", validf=validf, counts=counts)
    # attention pooling over positions
    scores = hidden @ params["pool_w"]
    scores = np.where(asm.valid, scores, -np.inf)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=1, keepdims=True)
    pooled = np.einsum("bl,bld->bd", w, hidden)
    return pooled, dict(kind="attention", w=w, hidden=hidden)


def _pool_backward(d_pooled, cache, asm: BatchAssembly, params, grads, config):
    b, l, d = cache["hidden_shape"]
    d_hidden = np.zeros((b, l, d))
    pc = cache["pool"]
    if pc["kind"] == "last":
        d_hidden[np.arange(b), pc["idx"]] = d_pooled
    elif pc["kind"] == "sum":
        d_hidden += d_pooled[:, None, :] * pc["validf"][:, :, None]
    elif pc["kind"] == "mean":
        d_hidden += (d_pooled / pc["counts"])[:, None, :] * pc["validf"][:, :, None]
    else:
        w, hidden = pc["w"], pc["hidden"]
        d_w = np.einsum("bd,bld->bl", d_pooled, hidden)
        d_hidden += w[:, :, None] * d_pooled[:, None, :]
        d_scores = w * (d_w - np.sum(d_w * w, axis=1, keepdims=True))
        grads["pool_w"] += np.einsum("bl,bld->d", d_scores, hidden)
        d_hidden += d_scores[:, :, None] * params["pool_w"][None, None, :]
    return d_hidden


def backward_batch(cache, params: dict, config: EncoderConfig,
                   d_hidden: np.ndarray | None, d_user_vec: np.ndarray | None) -> dict:
    """Chain gradients from (hidden states, normalized user vector) to all parameters."""
    asm: BatchAssembly = cache["asm"]
    b, l = asm.valid.shape
    d = config.d_model
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    dx = np.zeros((b, l, d)) if d_hidden is None else d_hidden.copy()
    if d_user_vec is not None:
        d_pooled = l2_normalize_backward(cache["user_vec"], cache["norms"], d_user_vec)
        dx += _pool_backward(
            d_pooled,
            dict(pool=cache["pool"], hidden_shape=(b, l, d)),
            asm, params, grads, config)

    for i in reversed(range(config.n_layers)):
        attn_cache, m1, ln1_cache, ffn_cache, m2, ln2_cache = cache["layers"][i]
        dx, dg2, db2 = layer_norm_backward(ln2_cache, dx)
        grads[layer_key(i, "ln2_g")] += dg2
        grads[layer_key(i, "ln2_b")] += db2
        d_ffn_out = dropout_backward(m2, dx)
        d_h1, dw1, db1_, dw2, db2_ = ffn_backward(ffn_cache, d_ffn_out)
        grads[layer_key(i, "ffn_w1")] += dw1
        grads[layer_key(i, "ffn_b1")] += db1_
        grads[layer_key(i, "ffn_w2")] += dw2
        grads[layer_key(i, "ffn_b2")] += db2_
        dx = dx + d_h1
        dx, dg1, db1 = layer_norm_backward(ln1_cache, dx)
        grads[layer_key(i, "ln1_g")] += dg1
        grads[layer_key(i, "ln1_b")] += db1
        d_attn_out = dropout_backward(m1, dx)
        d_x_attn, dwq, dwk, dwv, dwo = mha_backward(attn_cache, d_attn_out)
        grads[layer_key(i, "wq")] += dwq
        grads[layer_key(i, "wk")] += dwk
        grads[layer_key(i, "wv")] += dwv
        grads[layer_key(i, "wo")] += dwo
        dx = dx + d_x_attn

    d_tokens = dropout_backward(cache["in_mask"], dx)
    assembly_backward(asm, d_tokens, grads)
    return grads


def encode_sequence(sample, embeddings, params: dict, config: EncoderConfig,
                    surfaces: dict | None = None):
    """Encode one sample in eval mode; returns (hidden (L',d), user_vec (d,))."""
    asm = assemble_batch_inputs([sample], embeddings, params, config, surfaces)
    hidden, user_vec, _ = encode_batch(asm, params, config, train=False)
    L = int(asm.lengths[0])
    return hidden[0, :L], user_vec[0]


def encode_user_vectors(samples: list, embeddings, params: dict,
                        config: EncoderConfig, surfaces: dict | None = None,
                        chunk: int = 256) -> np.ndarray:
    """Eval-mode user vectors for many samples, batched for throughput."""
    out = np.zeros((len(samples), config.d_model))
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        asm = assemble_batch_inputs(part, embeddings, params, config, surfaces)
        _, user_vec, _ = encode_batch(asm, params, config, train=False)
        out[lo:lo + len(part)] = user_vec
    return out


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + raw little-endian float32 payload, bit-exact
# ---------------------------------------------------------------------------

def quantize_params(params: dict) -> dict:
    """Round-trip parameters through float32, the checkpoint's storage precision."""
    return tensorio.quantize(params)


def _config_dict(config: EncoderConfig) -> dict:
    return {
        "d_model": config.d_model, "n_heads": config.n_heads,
        "n_layers": config.n_layers, "max_seq_len": config.max_seq_len,
        "dropout": config.dropout, "pooling": config.pooling,
        "d_ff": config.d_ff, "n_surfaces": config.n_surfaces,
        "use_cls": config.use_cls, "causal": config.causal,
        "use_time": config.use_time,
    }


def save_checkpoint(path, params: dict, config: EncoderConfig,
                    extra: dict | None = None) -> dict:
    """Write params + config; returns the float32-quantized params actually stored."""
    meta = {"config": _config_dict(config), "extra": extra or {}}
    return tensorio.save_tensors(path, params, meta)


def load_checkpoint(path) -> tuple[dict, EncoderConfig, dict]:
    params, meta = tensorio.load_tensors(path)
    config = EncoderConfig(**meta["config"])
    return params, config, meta.get("extra", {})
