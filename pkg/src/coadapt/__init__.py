"""Episodic few-shot classification with co-adapted support and query embeddings."""

__version__ = "0.1.0"

from .attention import (
    AdaptationResult,
    MABParameters,
    attention,
    co_adapt,
    init_mab,
    mab_cad,
    mab_original,
    nonparametric_mab,
)
from .encoder import EncoderParameters, encode, init_encoder
from .episodes import Dataset, Episode, generate_blobs, generate_distractor, load_dataset, sample_episode, save_dataset
from .protonet import ClassDistribution, classify, episode_accuracy, episode_loss, prototypes
from .trainer import EvalReport, TrainConfig, ablation_sweep, evaluate, load_checkpoint, save_checkpoint, train

__all__ = [
    "AdaptationResult", "ClassDistribution", "Dataset", "EncoderParameters", "Episode", "EvalReport",
    "MABParameters", "TrainConfig", "ablation_sweep", "attention", "classify", "co_adapt", "encode",
    "episode_accuracy", "episode_loss", "evaluate", "generate_blobs", "generate_distractor", "init_encoder",
    "init_mab", "load_checkpoint", "load_dataset", "mab_cad", "mab_original", "nonparametric_mab", "prototypes",
    "sample_episode", "save_checkpoint", "save_dataset", "train",
]
