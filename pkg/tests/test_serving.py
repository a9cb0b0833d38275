import threading

import numpy as np
import pytest

from seqrec.configs import DatasetConfig, EncoderConfig
from seqrec.encoder import init_params
from seqrec.metrics import knn_top_ids
from seqrec.post_encoder import PostEncoder
from seqrec.serving import (
    ColdUserError, EmbeddingStore, IntegrityRejectedError, ServingSim,
    calibrate_threshold,
)
from seqrec.world import SECONDS_PER_DAY, build_world


@pytest.fixture(scope="module")
def sim_world():
    cfg = DatasetConfig(users=60, posts_per_day=40, days=12, n_topics=8,
                        activity_rate=3.0, calibrate_survival=False)
    bundle = build_world(cfg, seed=31)
    enc_cfg = EncoderConfig(d_model=cfg.topic_dim, n_heads=4, n_layers=1,
                            max_seq_len=8, dropout=0.0, pooling="last",
                            n_surfaces=len(cfg.surfaces))
    penc = PostEncoder("oracle", cfg, oracle_seed=31)
    params = init_params(enc_cfg, seed=1)
    return bundle, enc_cfg, penc, params


def make_sim(sim_world):
    bundle, enc_cfg, penc, params = sim_world
    surfaces = {s: i for i, s in enumerate(bundle.config.surfaces)}
    return ServingSim(posts=bundle.posts, params=params, enc_cfg=enc_cfg,
                      post_encoder=penc, surfaces=surfaces), bundle


class TestEmbeddingStore:
    def test_version_increments_and_latest_served(self):
        store = EmbeddingStore()
        v1 = store.stage_upsert(7, np.ones(4), updated_at=0)
        store.commit()
        v2 = store.stage_upsert(7, 2 * np.ones(4), updated_at=1)
        store.commit()
        assert (v1, v2) == (1, 2)
        entry = store.get(7)
        assert entry.version == 2
        np.testing.assert_array_equal(entry.vector, np.full(4, 2.0, dtype=np.float32))

    def test_staged_writes_invisible_until_commit(self):
        store = EmbeddingStore()
        store.stage_upsert(1, np.ones(2), updated_at=0)
        assert store.get(1) is None
        store.commit()
        assert store.get(1) is not None

    def test_commit_swaps_whole_batch_atomically(self):
        store = EmbeddingStore()
        for i in range(5):
            store.stage_upsert(i, np.full(2, float(i)), updated_at=0)
        snap_before = store.snapshot()
        store.commit()
        assert len(snap_before[1]) == 0
        assert len(store.snapshot()[1]) == 5

    def test_vector_bytes_round_trip(self):
        store = EmbeddingStore()
        vec = np.array([0.1, -0.7, 0.3], dtype=np.float32)
        store.stage_upsert(5, vec, updated_at=0)
        store.commit()
        assert store.get(5).vector.tobytes() == vec.tobytes()

    def test_snapshot_isolation_under_concurrency(self):
        """10^4 mixed ops: readers never observe a torn (vector, version) pair."""
        store = EmbeddingStore()
        keys = list(range(8))
        for k in keys:
            store.stage_upsert(k, np.zeros(16), updated_at=0)
        store.commit()
        stop = threading.Event()
        errors = []

        def reader():
            rng = np.random.default_rng(threading.get_ident() % 2**32)
            while not stop.is_set():
                snap_id, data = store.snapshot()
                for k in keys:
                    entry = data[k]
                    vals = set(entry.vector.tolist())
                    if len(vals) != 1 or vals != {float(entry.version - 1)}:
                        errors.append((snap_id, k, entry.version, vals))
                        return

        threads = [threading.Thread(target=reader) for _ in range(3)]
        for t in threads:
            t.start()
        ops = 0
        version = 1
        while ops < 10_000:
            for k in keys:
                store.stage_upsert(k, np.full(16, float(version)), updated_at=version)
                ops += 1
            store.commit()
            version += 1
        stop.set()
        for t in threads:
            t.join()
        assert errors == []


class TestUpsertPost:
    def test_create_then_update_version_two(self, sim_world):
        sim, bundle = make_sim(sim_world)
        post = next(p for p in bundle.posts if not p.integrity_violating)
        assert sim.upsert_post(post) == 1
        assert sim.upsert_post(post) == 2
        sim.post_store.commit()
        assert sim.post_store.get(post.post_id).version == 2

    def test_integrity_flagged_rejected(self, sim_world):
        sim, bundle = make_sim(sim_world)
        flagged = next(p for p in bundle.posts if p.integrity_violating)
        with pytest.raises(IntegrityRejectedError):
            sim.upsert_post(flagged)
        sim.post_store.commit()
        assert sim.post_store.get(flagged.post_id) is None

    def test_upserted_bytes_round_trip(self, sim_world):
        sim, bundle = make_sim(sim_world)
        post = next(p for p in bundle.posts if not p.integrity_violating)
        sim.upsert_post(post)
        sim.post_store.commit()
        expected = sim.post_encoder.encode_one(post).astype(np.float32)
        assert sim.post_store.get(post.post_id).vector.tobytes() == expected.tobytes()


class TestRefreshUsers:
    def test_no_new_events_zero_refreshed(self, sim_world):
        sim, bundle = make_sim(sim_world)
        sim.bootstrap_posts(day=8)
        assert sim.refresh_users(bundle.events, day=8) > 0
        assert sim.refresh_users(bundle.events, day=8) == 0  # nothing fresh now

    def test_only_active_users_refreshed(self, sim_world):
        sim, bundle = make_sim(sim_world)
        sim.bootstrap_posts(day=8)
        sim.refresh_users(bundle.events, day=8)
        uid = bundle.events[0].user_id
        fresh = [e for e in bundle.events if e.user_id == uid and
                 8 * SECONDS_PER_DAY <= e.ts < 9 * SECONDS_PER_DAY]
        assert fresh, "fixture user should have day-8 events"
        count = sim.refresh_users(bundle.events, day=9)
        active = {e.user_id for e in bundle.events
                  if 8 * SECONDS_PER_DAY <= e.ts < 9 * SECONDS_PER_DAY}
        # only users with events since the last refresh are recomputed
        assert count == len({u for u in active if any(
            e.user_id == u and e.ts < 9 * SECONDS_PER_DAY for e in bundle.events)})

    def test_refresh_matches_offline_encoding(self, sim_world):
        from seqrec.encoder import encode_sequence
        from seqrec.samples import HistoryItem, SequenceSample
        sim, bundle = make_sim(sim_world)
        sim.bootstrap_posts(day=10)
        sim.refresh_users(bundle.events, day=10)
        by_id = bundle.post_by_id()
        cutoff = 10 * SECONDS_PER_DAY
        per_user = {}
        for e in bundle.events:
            if e.ts < cutoff:
                per_user.setdefault(e.user_id, []).append(e)
        uid, stream = next((u, s) for u, s in sorted(per_user.items()) if len(s) >= 4)
        hist = [HistoryItem(e.post_id, int(e.action), e.surface, e.ts)
                for e in stream if not by_id[e.post_id].integrity_violating]
        hist = hist[-sim.enc_cfg.max_seq_len:]
        sample = SequenceSample(uid, hist, [], cutoff)
        penc = sim.post_encoder
        from seqrec.embeddings import EmbeddingSet
        embs = penc.encode_all([p for p in bundle.posts if not p.integrity_violating])
        _, offline_vec = encode_sequence(sample, embs, sim.params, sim.enc_cfg, sim.surfaces)
        served = sim.user_store.get(uid).vector.astype(np.float64)
        assert np.max(np.abs(served - offline_vec)) < 1e-7


class TestRetrieve:
    def _ready_sim(self, sim_world, day=10):
        sim, bundle = make_sim(sim_world)
        sim.bootstrap_posts(day=day)
        sim.refresh_users(bundle.events, day=day)
        return sim, bundle

    def test_unknown_user_cold_error(self, sim_world):
        sim, _ = self._ready_sim(sim_world)
        with pytest.raises(ColdUserError):
            sim.retrieve(999_999, 5)

    def test_k_nonpositive_rejected(self, sim_world):
        sim, bundle = self._ready_sim(sim_world)
        uid = bundle.events[0].user_id
        with pytest.raises(ValueError):
            sim.retrieve(uid, 0)

    def test_threshold_above_one_filters_everything(self, sim_world):
        sim, bundle = self._ready_sim(sim_world)
        uid = bundle.events[0].user_id
        res = sim.retrieve(uid, 5, threshold=1.0 + 1e-6)
        assert res.ranked == []
        assert res.filtered_count == 5

    def test_scores_non_increasing_and_above_threshold(self, sim_world):
        sim, bundle = self._ready_sim(sim_world)
        uid = bundle.events[0].user_id
        res = sim.retrieve(uid, 10, threshold=0.0)
        scores = [s for _, s in res.ranked]
        assert all(a >= b for a, b in zip(scores, scores[1:]))
        assert all(s >= 0.0 for s in scores)

    def test_matches_offline_knn_oracle(self, sim_world):
        sim, bundle = self._ready_sim(sim_world)
        alive = [p for p in bundle.posts
                 if p.alive_on(10) and not p.integrity_violating]
        ids = np.array([p.post_id for p in alive], dtype=np.int64)
        vecs = np.stack([sim.post_store.get(p.post_id).vector.astype(np.float64)
                         for p in alive])
        users = sorted({e.user_id for e in bundle.events})[:40]
        for uid in users:
            if sim.user_store.get(uid) is None:
                continue
            res = sim.retrieve(uid, 10, threshold=-1.0)
            uvec = sim.user_store.get(uid).vector.astype(np.float64)
            oracle = knn_top_ids(uvec, ids, vecs, 10)
            assert [pid for pid, _ in res.ranked] == oracle.tolist()

    def test_query_log_schema(self, sim_world, tmp_path):
        import json
        sim, bundle = self._ready_sim(sim_world)
        uid = bundle.events[0].user_id
        sim.retrieve(uid, 3, threshold=-1.0)
        sim.write_query_log(tmp_path / "q.jsonl")
        rec = json.loads((tmp_path / "q.jsonl").read_text().splitlines()[0])
        assert set(rec) == {"user_id", "K", "threshold", "returned", "scores", "ts"}

    def test_single_alive_post_threshold_boundary(self, sim_world):
        sim, bundle = make_sim(sim_world)
        post = next(p for p in bundle.posts
                    if p.created_at == 0 and not p.integrity_violating)
        sim.upsert_post(post)
        sim.post_store.commit()
        sim.current_day = post.created_at
        sim.user_store.stage_upsert(1, post.topic / np.linalg.norm(post.topic), 0)
        sim.user_store.commit()
        sim.current_day = post.created_at
        res = sim.retrieve(1, 5, threshold=-1.0)
        alive_now = [p for p in [post]]
        assert len(res.ranked) == 1
        score = res.ranked[0][1]
        assert sim.retrieve(1, 5, threshold=score).ranked != []
        assert sim.retrieve(1, 5, threshold=score + 1e-9).ranked == []


class TestCalibrateThreshold:
    def _validation(self, sim_world):
        sim, bundle = make_sim(sim_world)
        sim.bootstrap_posts(day=10)
        sim.refresh_users(bundle.events, day=10)
        per_user = {}
        for e in bundle.events:
            if e.ts >= 10 * SECONDS_PER_DAY:
                per_user.setdefault(e.user_id, set()).add(e.post_id)
        validation = [(u, ids) for u, ids in sorted(per_user.items())
                      if sim.user_store.get(u) is not None][:30]
        return sim, validation

    def test_target_zero_keeps_all(self, sim_world):
        sim, validation = self._validation(sim_world)
        t, prec, rec = calibrate_threshold(sim, validation, k=10, target_precision=0.0)
        assert t == -1.0

    def test_precision_at_threshold_meets_target(self, sim_world):
        sim, validation = self._validation(sim_world)
        t0, base_prec, _ = calibrate_threshold(sim, validation, k=10, target_precision=0.0)
        target = min(0.95, base_prec * 1.5 + 0.05)
        t, prec, rec = calibrate_threshold(sim, validation, k=10, target_precision=target)
        if prec >= target:          # attainable
            assert t >= t0
        # recount oracle: recompute precision from scratch at that threshold
        kept = rel_kept = 0
        for uid, relevant in validation:
            res = sim.retrieve(uid, 10, threshold=-1.0)
            for pid, sc in res.ranked:
                if sc >= t:
                    kept += 1
                    rel_kept += pid in relevant
        assert kept == 0 or abs(rel_kept / kept - prec) < 1e-12

    def test_separable_scores_reach_precision_one(self):
        class StubSim:
            def __init__(self):
                self.data = {1: [(10, 0.9), (11, 0.8), (12, 0.2)],
                             2: [(20, 0.95), (21, 0.1)]}
            def retrieve(self, uid, k, threshold=-1.0):
                from seqrec.serving import QueryResult
                return QueryResult(ranked=self.data[uid], filtered_count=0)
        sim = StubSim()
        validation = [(1, {10, 11}), (2, {20})]
        t, prec, rec = calibrate_threshold(sim, validation, k=3, target_precision=1.0)
        assert prec == 1.0
        assert 0.2 < t <= 0.8
        assert rec == 1.0
