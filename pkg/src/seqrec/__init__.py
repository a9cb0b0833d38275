"""seqrec: desk-scale sequential user-to-post recommender.

A causal-masked transformer user tower over fixed pre-trained post embeddings,
trained with scaled in-batch-negative cross-entropy on dual short-term /
long-term objectives, plus the synthetic data pipeline, evaluation suite,
cold-start backfill strategies and a serving simulator around it.
"""

__version__ = "0.1.0"

from .actions import ActionType
from .configs import (
    BackfillPolicy,
    DatasetConfig,
    EncoderConfig,
    LossConfig,
    TrainConfig,
)
from .world import generate_world

__all__ = [
    "ActionType", "BackfillPolicy", "DatasetConfig", "EncoderConfig",
    "LossConfig", "TrainConfig", "generate_world", "__version__",
]
