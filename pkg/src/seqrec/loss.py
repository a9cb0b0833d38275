"""Scaled in-batch-negative cross-entropy and the short/long-term objectives.

Logits are `scale * cosine(anchor, candidate)`. Per anchor the candidate set is
its positive plus a pool of posts contributed by *other* users in the batch;
pool entries owned by the anchor's user (anything in their own history or label
set, which also covers any candidate sharing the positive's post id) are masked
out of the denominator, so an anchor is never penalized against itself.

Losses are means over contributed terms, which keeps magnitudes comparable
across batch sizes. Each loss returns its gradient with respect to the model
outputs it consumed; parameter gradients are obtained by chaining through the
encoder backward pass.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .configs import LossConfig

log = logging.getLogger(__name__)


def scaled_cross_entropy(anchor, positive, negatives, s: float) -> float:
    """Softmax cross-entropy over [positive; negatives] with logits s*cosine.

    All vectors must be unit-norm. With no negatives the loss is exactly 0.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    cands = [np.asarray(positive, dtype=np.float64)]
    cands.extend(np.asarray(n, dtype=np.float64) for n in negatives)
    for v in [anchor] + cands:
        norm = np.linalg.norm(v)
        if abs(norm - 1.0) > 1e-4:
            raise ValueError(f"expected unit-norm vectors, got norm {norm:.6f}")
    logits = s * np.array([float(anchor @ c) for c in cands])
    m = logits.max()
    return float(np.log(np.exp(logits - m).sum()) + m - logits[0])


@dataclass(eq=False)
class NegativePool:
    """Unique candidate posts with per-batch-row ownership.

    owners[b, i] is True when batch row b's user contributed candidate i, in
    which case i is never used as a negative for that row.
    """

    ids: np.ndarray        # (Np,) int64, sorted
    vectors: np.ndarray    # (Np, D) float64 unit rows
    owners: np.ndarray     # (B, Np) bool

    def __len__(self) -> int:
        return len(self.ids)


def build_pool(per_row_ids: list, embeddings) -> NegativePool:
    """Pool from per-batch-row post-id collections (deduplicated across rows)."""
    all_ids = sorted({int(pid) for ids in per_row_ids for pid in ids})
    id_to_col = {pid: i for i, pid in enumerate(all_ids)}
    owners = np.zeros((len(per_row_ids), len(all_ids)), dtype=bool)
    for b, ids in enumerate(per_row_ids):
        for pid in ids:
            owners[b, id_to_col[int(pid)]] = True
    vectors = embeddings.gather(all_ids) if all_ids else np.zeros((0, embeddings.dim))
    return NegativePool(ids=np.array(all_ids, dtype=np.int64), vectors=vectors,
                        owners=owners)


def sample_negatives(pool: NegativePool, k: int, seed: int) -> NegativePool:
    """Uniform subsample of k pool candidates without replacement (per seed).

    Asking for the whole pool (or more) returns it unchanged; k larger than the
    pool is only warned about, not an error.
    """
    if k >= len(pool):
        if k > len(pool):
            log.warning("sample_negatives: k=%d exceeds pool size %d; using full pool",
                        k, len(pool))
        return pool
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    cols = np.sort(rng.choice(len(pool), size=k, replace=False))
    return NegativePool(ids=pool.ids[cols], vectors=pool.vectors[cols],
                        owners=pool.owners[:, cols])


def _maybe_sample(pool: NegativePool, cfg: LossConfig, seed: int) -> NegativePool:
    if cfg.neg_mode == "sampled":
        return sample_negatives(pool, cfg.neg_sample_k, seed)
    return pool


@dataclass(eq=False)
class LossResult:
    loss: float
    n_terms: int
    d_anchor_raw: np.ndarray | None = None   # gradient wrt the raw (pre-norm) anchors


def _ce_terms(anchors_raw: np.ndarray, pos_vecs: np.ndarray, pool: NegativePool,
              row_of_anchor: np.ndarray, s: float) -> LossResult:
    """Shared core: normalized anchors against [positive | unowned pool columns].

    anchors_raw: (Na, D) pre-normalization anchors; pos_vecs: (Na, D) unit.
    Gradient returned is wrt anchors_raw, averaged over terms.
    """
    na = anchors_raw.shape[0]
    if na == 0:
        return LossResult(0.0, 0, np.zeros_like(anchors_raw))
    norms = np.linalg.norm(anchors_raw, axis=1, keepdims=True)
    anchors = anchors_raw / norms
    pos_logit = s * np.sum(anchors * pos_vecs, axis=1)                 # (Na,)
    if len(pool):
        neg_logits = s * (anchors @ pool.vectors.T)                    # (Na, Np)
        blocked = pool.owners[row_of_anchor]                           # (Na, Np)
        neg_logits = np.where(blocked, -np.inf, neg_logits)
        logits = np.concatenate([pos_logit[:, None], neg_logits], axis=1)
    else:
        logits = pos_logit[:, None]
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(z[:, 0]) + m[:, 0] - pos_logit))
    p = e / z                                                          # softmax probs
    # dL/d_anchor = s/Na * (sum_j p_j c_j - c_pos); masked columns have p == 0
    d_anchor = (p[:, 0:1] - 1.0) * pos_vecs
    if len(pool):
        d_anchor += p[:, 1:] @ pool.vectors
    d_anchor *= s / na
    d_raw = (d_anchor - anchors * np.sum(anchors * d_anchor, axis=1, keepdims=True)) / norms
    return LossResult(loss, na, d_raw)


def short_term_loss(hidden: np.ndarray, asm, samples: list, embeddings,
                    cfg: LossConfig, max_seq_len: int, use_cls: bool,
                    neg_seed: int = 0) -> tuple[LossResult, np.ndarray]:
    """Per-position next-post objective under the causal mask.

    For every history position with a successor, the hidden state at that
    position (normalized) must match the next post's embedding against all
    other users' history posts. Returns (result, d_hidden).
    """
    b_total = hidden.shape[0]
    cls_extra = 1 if use_cls else 0
    hists = [s.history[-max_seq_len:] for s in samples]
    if len({s.user_id for s in samples}) < 2:
        log.warning("short_term_loss: batch has a single user; no negatives exist")
    pool = _maybe_sample(build_pool([[h.post_id for h in hist] for hist in hists],
                                    embeddings), cfg, neg_seed)
    anchor_pos = []    # (row, col) of the anchor hidden state
    pos_ids = []
    for b, hist in enumerate(hists):
        for t in range(len(hist) - 1):
            anchor_pos.append((b, t + cls_extra))
            pos_ids.append(hist[t + 1].post_id)
    d_hidden = np.zeros_like(hidden)
    if not anchor_pos:
        return LossResult(0.0, 0), d_hidden
    rows = np.array([r for r, _ in anchor_pos])
    cols = np.array([c for _, c in anchor_pos])
    anchors_raw = hidden[rows, cols]
    pos_vecs = embeddings.gather(pos_ids)
    res = _ce_terms(anchors_raw, pos_vecs, pool, rows, cfg.scale)
    np.add.at(d_hidden, (rows, cols), res.d_anchor_raw)
    return res, d_hidden


def long_term_loss(user_vecs: np.ndarray, samples: list, embeddings,
                   cfg: LossConfig, neg_seed: int = 0) -> tuple[LossResult, np.ndarray]:
    """Multi-label objective: the pooled user vector must match each of up to m
    future posts against the long targets owned by other users in the batch.

    user_vecs rows must already be unit-norm (the encoder emits them that way).
    Returns (result, d_user_vecs) with the gradient taken wrt the unit vectors.
    """
    targets = [s.long_targets[:cfg.m] for s in samples]
    if len({s.user_id for s in samples}) < 2:
        log.warning("long_term_loss: batch has a single user; no negatives exist")
    pool = _maybe_sample(build_pool(targets, embeddings), cfg, neg_seed)
    rows, pos_ids = [], []
    for b, tgt in enumerate(targets):
        for pid in tgt:
            rows.append(b)
            pos_ids.append(pid)
    d_user = np.zeros_like(user_vecs)
    if not rows:
        return LossResult(0.0, 0), d_user
    rows = np.array(rows)
    anchors = user_vecs[rows]
    pos_vecs = embeddings.gather(pos_ids)

    na = anchors.shape[0]
    s = cfg.scale
    pos_logit = s * np.sum(anchors * pos_vecs, axis=1)
    neg_logits = s * (anchors @ pool.vectors.T)
    neg_logits = np.where(pool.owners[rows], -np.inf, neg_logits)
    logits = np.concatenate([pos_logit[:, None], neg_logits], axis=1)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(z[:, 0]) + m[:, 0] - pos_logit))
    p = e / z
    d_anchor = (p[:, 0:1] - 1.0) * pos_vecs + p[:, 1:] @ pool.vectors
    d_anchor *= s / na
    np.add.at(d_user, rows, d_anchor)
    return LossResult(loss, na), d_user


def total_loss(short: float, long: float, cfg: LossConfig) -> float:
    """Weighted combination of the two objectives."""
    return cfg.w_short * short + cfg.w_long * long
