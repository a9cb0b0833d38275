"""Configuration dataclasses with validation, JSON round-trip and flag overrides.

Precedence when resolving a run: CLI flag > JSON config file > dataclass default.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

DEFAULT_SURFACES = ("feed", "groups_tab", "search")
DEFAULT_LANGUAGES = ("en", "es", "pt", "de")
DEFAULT_COUNTRIES = ("us", "br", "mx", "de", "in", "gb")


@dataclass
class DatasetConfig:
    """Knobs of the synthetic engagement world generator.

    Users never re-engage a post, so topical behavior needs supply headroom:
    keep activity_rate comfortably below posts_per_day / n_topics, otherwise
    users exhaust their matched topics and are forced onto off-topic posts.
    """

    users: int = 500
    posts_per_day: int = 250
    days: int = 35
    # Topic geometry. Post embeddings produced by the oracle encoder live in
    # the same space as topics, so topic_dim doubles as the embedding dim there.
    topic_dim: int = 64
    n_topics: int = 24
    topic_jitter: float = 0.25
    # Synthetic content channels fed to the trainable post encoder.
    channel_dim: int = 24
    channel_noise: float = 0.30
    max_images: int = 4
    image_rate: float = 0.6        # P(post has >=1 image)
    # Post shelf-life calibration (fraction of week-0-engaged posts that are
    # still engaged one / two weeks later).
    survival_week1: float = 0.23
    survival_week2: float = 0.10
    integrity_rate: float = 0.02
    calibrate_survival: bool = True   # pilot-pass correction of lifetime shares
    # Engagement dynamics.
    activity_rate: float = 8.0     # expected events per user per day
    session_rate: float = 1.0      # P(user is active on a day); <1 gives bursty sessions
    affinity_strength: float = 10.0  # sharpness of topical post choice
    exploration: float = 0.08      # uniform mixing so no eligible post starves
    lang_match_boost: float = 2.5  # multiplicative preference for own-language posts
    max_affinity_components: int = 3
    drift_rate: float = 0.0        # radians/day of interest rotation
    # Action emission: P(high-signal action) rises with topical closeness.
    action_signal_sharpness: float = 4.0
    action_signal_pivot: float = 0.60
    timespent_rate: float = 0.10   # share of TIME_SPENT within the neutral mass
    # Cold-start population shaping.
    cold_user_frac: float = 0.0    # users whose first event falls in the last cold_start_window days
    marginal_user_frac: float = 0.0
    marginal_activity_rate: float = 0.12
    cold_start_window: int = 5
    # Fresh accounts browse the popular/language feed before personalization
    # kicks in: topical sharpness is damped for their first active days.
    newuser_days: int = 2
    newuser_topic_damp: float = 0.3
    lang_topic_concentration: float = 0.8
    surfaces: tuple[str, ...] = DEFAULT_SURFACES
    languages: tuple[str, ...] = DEFAULT_LANGUAGES
    countries: tuple[str, ...] = DEFAULT_COUNTRIES

    def __post_init__(self) -> None:
        if self.users <= 0 or self.posts_per_day <= 0 or self.days <= 0:
            raise ValueError("users, posts_per_day and days must be positive")
        if not (0.0 < self.survival_week2 < self.survival_week1 < 1.0):
            raise ValueError(
                "survival fractions must satisfy 0 < week2 < week1 < 1 "
                f"(got week1={self.survival_week1}, week2={self.survival_week2})"
            )
        if self.topic_dim < 2 or self.n_topics < 1:
            raise ValueError("topic_dim must be >= 2 and n_topics >= 1")
        if not (0.0 <= self.exploration <= 1.0):
            raise ValueError("exploration must lie in [0, 1]")
        if self.activity_rate < 0:
            raise ValueError("activity_rate must be non-negative")
        self.surfaces = tuple(self.surfaces)
        self.languages = tuple(self.languages)
        self.countries = tuple(self.countries)


@dataclass
class EncoderConfig:
    """Architecture of the sequence user tower.

    d_model must equal the post-embedding dimension: the tower's output is
    compared to post vectors by cosine.
    """

    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 32          # history positions, excluding CLS
    dropout: float = 0.2
    pooling: str = "last"          # last | mean | sum | attention
    d_ff: int = 128
    n_surfaces: int = len(DEFAULT_SURFACES)
    use_cls: bool = True
    causal: bool = True
    use_time: bool = True          # feed log(1 + seconds-ago) alongside the post vector

    POOLINGS = ("last", "mean", "sum", "attention")

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if self.pooling not in self.POOLINGS:
            raise ValueError(f"pooling must be one of {self.POOLINGS}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LossConfig:
    """Scaled in-batch-negative cross-entropy and the two-objective mix."""

    scale: float = 16.0            # cosine-logit multiplier; useful range ~[15, 20]
    w_short: float = 0.5
    w_long: float = 0.5
    m: int = 5                     # long-horizon label count
    neg_mode: str = "full_pool"    # full_pool | sampled
    neg_sample_k: int = 500

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.w_short < 0 or self.w_long < 0 or abs(self.w_short + self.w_long - 1.0) > 1e-9:
            raise ValueError("w_short and w_long must be non-negative and sum to 1")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.neg_mode not in ("full_pool", "sampled"):
            raise ValueError("neg_mode must be 'full_pool' or 'sampled'")
        if self.neg_mode == "sampled" and self.neg_sample_k < 0:
            raise ValueError("neg_sample_k must be >= 0")


VARIANTS = (
    "baseline_avg",
    "ttt",
    "ttt_cls",
    "ttt_causal",
    "ttt_causal_long",
    "ttt_causal_long_short",
    "full_with_time",
)


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 7e-4
    grad_clip: float = 1.0
    dropout: float = 0.2
    epochs: int = 5
    seed: int = 0
    variant: str = "full_with_time"
    max_train_samples_per_user: int = 4
    sample_stride: int | None = None   # defaults to the long horizon m

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2: in-batch negatives need other users")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive (use math.inf to disable)")


@dataclass
class BackfillPolicy:
    mode: str = "none"             # none | popular | similar_user
    marginal_threshold: int = 3    # histories shorter than this get backfilled
    fill_to: int = 8

    def __post_init__(self) -> None:
        if self.mode not in ("none", "popular", "similar_user"):
            raise ValueError("mode must be one of none|popular|similar_user")
        if self.marginal_threshold < 1 or self.fill_to < 1:
            raise ValueError("marginal_threshold and fill_to must be >= 1")


def to_json_dict(cfg: Any) -> dict:
    """Dataclass -> plain JSON-serializable dict (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def from_json_dict(cls, data: dict):
    """Build a config dataclass from a dict, rejecting unknown keys."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def load_json_config(cls, path):
    with open(path, "r", encoding="utf-8") as fh:
        return from_json_dict(cls, json.load(fh))


def apply_overrides(cfg, overrides: dict[str, Any]):
    """Return a copy of cfg with the given field=value overrides applied."""
    if not overrides:
        return cfg
    return dataclasses.replace(cfg, **overrides)
