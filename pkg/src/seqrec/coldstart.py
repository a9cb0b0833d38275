"""History backfill for cold-start and marginal users.

Two strategies: seed the history with popular posts that match the user's
language and country, or copy recent engagements from the most similar user
(TF-IDF cosine over post-id incidence). Synthetic backfill entries carry a
reserved action id, are timestamped strictly before any real event, and are
sourced exclusively from the supplied (training-window) event slice, so no
future information can leak into a history.
"""
from __future__ import annotations

import logging
import math

import numpy as np

from .actions import BACKFILL_ACTION_ID
from .configs import BackfillPolicy
from .samples import HistoryItem

log = logging.getLogger(__name__)

BACKFILL_SPACING_S = 3600  # one synthetic event per hour, oldest first


class UserSimilarity:
    """Cosine similarity between users' TF-IDF weighted post-id incidence vectors."""

    def __init__(self, events_window: list):
        tf: dict[int, dict[int, float]] = {}
        df: dict[int, set] = {}
        for e in events_window:
            tf.setdefault(e.user_id, {})
            tf[e.user_id][e.post_id] = tf[e.user_id].get(e.post_id, 0.0) + 1.0
            df.setdefault(e.post_id, set()).add(e.user_id)
        n_users = max(len(tf), 1)
        self._idf = {pid: math.log((1 + n_users) / (1 + len(users))) + 1.0
                     for pid, users in df.items()}
        self._vec: dict[int, dict[int, float]] = {}
        self._norm: dict[int, float] = {}
        for uid, counts in tf.items():
            v = {pid: c * self._idf[pid] for pid, c in counts.items()}
            self._vec[uid] = v
            self._norm[uid] = math.sqrt(sum(x * x for x in v.values()))
        self._post_users = {pid: sorted(users) for pid, users in df.items()}

    def similarity(self, u1: int, u2: int) -> float:
        if u1 not in self._vec or u2 not in self._vec:
            raise KeyError(f"similarity undefined for user(s) with no events: "
                           f"{[u for u in (u1, u2) if u not in self._vec]}")
        a, b = self._vec[u1], self._vec[u2]
        if len(b) < len(a):
            a, b = b, a
        dot = sum(w * b[pid] for pid, w in a.items() if pid in b)
        return dot / (self._norm[u1] * self._norm[u2])

    def top_neighbor(self, uid: int) -> int | None:
        """Most similar other user sharing at least one post; ties -> lowest id."""
        if uid not in self._vec:
            raise KeyError(f"user {uid} has no events")
        candidates = set()
        for pid in self._vec[uid]:
            candidates.update(self._post_users.get(pid, ()))
        candidates.discard(uid)
        best, best_sim = None, 0.0
        for other in sorted(candidates):
            sim = self.similarity(uid, other)
            if sim > best_sim + 1e-12:
                best, best_sim = other, sim
        return best


def user_user_similarity(events_window: list) -> UserSimilarity:
    return UserSimilarity(events_window)


class PopularityIndex:
    """Engagement counts per post over the training window, sliceable by attributes."""

    def __init__(self, events_window: list, posts: list):
        counts: dict[int, int] = {}
        for e in events_window:
            counts[e.post_id] = counts.get(e.post_id, 0) + 1
        self._by_attr: dict[tuple, list] = {}
        self._global: list = []
        by_id = {p.post_id: p for p in posts}
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        for pid, _ in ranked:
            post = by_id.get(pid)
            if post is None or post.integrity_violating:
                continue
            self._global.append(pid)
            self._by_attr.setdefault((post.lang, post.country), []).append(pid)

    def top(self, lang: str, country: str, n: int, exclude: set) -> tuple[list, bool]:
        """Top-n attribute-matched popular posts; falls back to global popularity
        when no post matches the attributes at all. Returns (ids, matched)."""
        pool = self._by_attr.get((lang, country))
        matched = pool is not None
        if not matched:
            pool = self._global
        out = [pid for pid in pool if pid not in exclude][:n]
        return out, matched


def _make_items(post_ids: list, before_ts: int) -> list:
    n = len(post_ids)
    return [HistoryItem(pid, BACKFILL_ACTION_ID, None,
                        before_ts - BACKFILL_SPACING_S * (n - i))
            for i, pid in enumerate(post_ids)]


def popular_backfill(user, real_history: list, popularity: PopularityIndex,
                     policy: BackfillPolicy, before_ts: int) -> list:
    """Synthetic history from attribute-matched popular posts, oldest first.

    Applies only below the marginal threshold and never displaces real events.
    """
    if len(real_history) >= policy.marginal_threshold:
        return []
    need = policy.fill_to - len(real_history)
    if need <= 0:
        return []
    exclude = {h.post_id for h in real_history}
    ids, matched = popularity.top(user.lang, user.country, need, exclude)
    if not matched:
        log.info("popular_backfill: no (%s, %s) posts in window for user %d; "
                 "using global popularity", user.lang, user.country, user.user_id)
    return _make_items(ids, before_ts)


def similar_user_backfill(user, real_history: list, events_window: list,
                          similarity: UserSimilarity, popularity: PopularityIndex,
                          policy: BackfillPolicy, before_ts: int) -> list:
    """Synthetic history copied from the most similar user's recent engagements.

    Users without any real event, or without any positive-similarity neighbor,
    fall back to popular backfill.
    """
    if len(real_history) >= policy.marginal_threshold:
        return []
    need = policy.fill_to - len(real_history)
    if need <= 0:
        return []
    neighbor = None
    if real_history:
        try:
            neighbor = similarity.top_neighbor(user.user_id)
        except KeyError:
            neighbor = None
    if neighbor is None:
        log.info("similar_user_backfill: no usable neighbor for user %d; "
                 "falling back to popular posts", user.user_id)
        return popular_backfill(user, real_history, popularity, policy, before_ts)
    exclude = {h.post_id for h in real_history}
    donor = sorted((e for e in events_window if e.user_id == neighbor),
                   key=lambda e: e.ts, reverse=True)
    ids: list[int] = []
    for e in donor:
        if e.post_id in exclude or e.post_id in ids:
            continue
        ids.append(e.post_id)
        if len(ids) == need:
            break
    ids.reverse()  # oldest of the copied events first
    return _make_items(ids, before_ts)


def backfill_history(user, real_history: list, policy: BackfillPolicy,
                     events_window: list, similarity: UserSimilarity | None,
                     popularity: PopularityIndex | None, cutoff_ts: int) -> list:
    """Full history under a policy: synthetic entries first, real events last."""
    if policy.mode == "none" or len(real_history) >= policy.marginal_threshold:
        return list(real_history)
    before_ts = real_history[0].ts if real_history else cutoff_ts
    if policy.mode == "popular":
        extra = popular_backfill(user, real_history, popularity, policy, before_ts)
    else:
        extra = similar_user_backfill(user, real_history, events_window,
                                      similarity, popularity, policy, before_ts)
    return extra + list(real_history)


def augment_with_backfill(samples: list, profiles: dict, events_window: list,
                          similarity: UserSimilarity, popularity: PopularityIndex,
                          fill_to: int, frac: float, seed: int) -> list:
    """Append cold/marginal lookalikes of a fraction of training samples.

    Each augmented copy keeps the sample's targets but truncates the history to
    0..2 most recent real events and backfills it (alternating popular and
    similar-user sources). Training on these teaches the tower how to read a
    served backfill history; without it, backfilled users sit out of the input
    distribution the model was fitted on.
    """
    from .samples import SequenceSample
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    out = list(samples)
    idxs = rng.permutation(len(samples))[: int(frac * len(samples))]
    for j, idx in enumerate(idxs):
        s = samples[int(idx)]
        user = profiles.get(s.user_id)
        if user is None:
            continue
        keep = int(rng.integers(0, 3))
        real = s.history[len(s.history) - keep:] if keep else []
        policy = BackfillPolicy(mode="popular" if j % 2 == 0 else "similar_user",
                                marginal_threshold=max(3, keep + 1),
                                fill_to=fill_to)
        hist = backfill_history(user, real, policy, events_window,
                                similarity, popularity, s.cutoff_time)
        hist = [h for h in hist if h.post_id not in set(s.long_targets)]
        if not hist:
            continue
        out.append(SequenceSample(s.user_id, hist, list(s.long_targets),
                                  s.cutoff_time, list(s.target_ts)))
    return out
