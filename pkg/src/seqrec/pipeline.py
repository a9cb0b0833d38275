"""End-to-end data preparation shared by the CLI, the experiments and the tests."""
from __future__ import annotations

from dataclasses import dataclass, field

from .configs import DatasetConfig, EncoderConfig
from .embeddings import EmbeddingSet
from .post_encoder import PostEncoder
from .samples import build_samples, filter_events
from .world import SECONDS_PER_DAY, WorldBundle, build_world


@dataclass(eq=False)
class PipelineData:
    bundle: WorldBundle
    events: list                   # filtered stream
    embeddings: EmbeddingSet
    post_encoder: PostEncoder
    train: list
    eval: list
    surfaces: dict
    holdout_start_ts: int
    eval_holdout_days: int
    extra: dict = field(default_factory=dict)

    @property
    def posts(self) -> list:
        return self.bundle.posts

    @property
    def users(self) -> list:
        return self.bundle.users


def prepare(dataset_cfg: DatasetConfig, seed: int, enc_cfg: EncoderConfig,
            eval_holdout_days: int = 3, m: int = 5,
            min_interactions: int = 2, drop_integrity: bool = True,
            encoder_mode: str = "oracle", oracle_sigma: float = 0.1,
            post_tower=None, max_train_per_user: int = 4,
            sample_stride: int | None = None,
            target_window_days: int | None = None) -> PipelineData:
    """Generate a world, filter it, embed its posts and cut train/eval samples."""
    bundle = build_world(dataset_cfg, seed)
    events = filter_events(bundle.events, min_interactions=min_interactions,
                           drop_integrity=drop_integrity, posts=bundle.posts)
    if encoder_mode == "oracle":
        penc = PostEncoder("oracle", dataset_cfg, oracle_sigma=oracle_sigma,
                           oracle_seed=seed)
    else:
        if post_tower is None:
            raise ValueError("trained encoder mode needs (params, tower_cfg)")
        params, tower_cfg = post_tower
        penc = PostEncoder("trained", dataset_cfg, tower_cfg=tower_cfg, params=params)
    embeddings = penc.encode_all(bundle.posts)
    train, eval_ = build_samples(events, L_max=enc_cfg.max_seq_len, m=m,
                                 eval_holdout_days=eval_holdout_days,
                                 stride=sample_stride,
                                 max_train_per_user=max_train_per_user,
                                 target_window_days=target_window_days)
    surfaces = {name: i for i, name in enumerate(dataset_cfg.surfaces)}
    horizon_day = max((e.ts for e in bundle.events), default=0) // SECONDS_PER_DAY + 1
    holdout_start_ts = (horizon_day - eval_holdout_days) * SECONDS_PER_DAY
    return PipelineData(bundle=bundle, events=events, embeddings=embeddings,
                        post_encoder=penc, train=train, eval=eval_,
                        surfaces=surfaces, holdout_start_ts=holdout_start_ts,
                        eval_holdout_days=eval_holdout_days)


def alive_corpus(posts: list, embeddings: EmbeddingSet,
                 day_from: int, day_to: int) -> tuple[list, "object"]:
    """Ids + vectors of non-flagged posts alive on any day in [day_from, day_to]."""
    ids = [p.post_id for p in posts
           if not p.integrity_violating
           and p.created_at < day_to + 1
           and p.created_at + p.lifetime_days > day_from
           and p.post_id in embeddings]
    return ids, embeddings.gather(ids)
