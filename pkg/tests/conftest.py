import numpy as np
import pytest

from seqrec.configs import DatasetConfig, EncoderConfig, LossConfig
from seqrec.embeddings import EmbeddingSet
from seqrec.pipeline import prepare
from seqrec.samples import HistoryItem, SequenceSample


def unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def random_embeddings(n: int, dim: int, seed: int = 0) -> EmbeddingSet:
    rng = np.random.Generator(np.random.PCG64(seed))
    vecs = unit_rows(rng.standard_normal((n, dim)))
    return EmbeddingSet(np.arange(n), vecs.astype(np.float32))


def make_samples(n_users: int, hist_lens, n_posts: int, seed: int = 0,
                 n_targets: int = 2, surfaces=("feed", "search")):
    """Small deterministic SequenceSample fixtures over post ids [0, n_posts)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    samples = []
    for b in range(n_users):
        n_hist = hist_lens[b % len(hist_lens)]
        t0 = 10_000 + 1000 * b
        hist = []
        used = set()
        for t in range(n_hist):
            pid = int(rng.integers(n_posts))
            used.add(pid)
            hist.append(HistoryItem(pid, int(rng.integers(9)),
                                    surfaces[int(rng.integers(len(surfaces)))],
                                    t0 + 60 * t))
        cutoff = t0 + 60 * n_hist + 30
        tgts = []
        while len(tgts) < n_targets:
            pid = int(rng.integers(n_posts))
            if pid not in used and pid not in tgts:
                tgts.append(pid)
        samples.append(SequenceSample(500 + b, hist, tgts, cutoff,
                                      [cutoff + 10 * (i + 1) for i in range(len(tgts))]))
    return samples


@pytest.fixture(scope="session")
def micro_enc_cfg():
    return EncoderConfig(d_model=8, n_heads=2, n_layers=2, max_seq_len=5,
                         dropout=0.0, pooling="attention", d_ff=16, n_surfaces=2)


@pytest.fixture(scope="session")
def small_world_data():
    """One modest drifting world shared by the slower integration tests."""
    cfg = DatasetConfig(users=120, posts_per_day=80, days=18, drift_rate=0.03,
                        calibrate_survival=False)
    return prepare(cfg, seed=3, enc_cfg=EncoderConfig(), eval_holdout_days=3, m=5)
