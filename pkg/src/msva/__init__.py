"""Supervised video summarization with parallel per-stream attention."""

from .data import FeatureBundle, FoldSplit, load_bundle, make_splits, synth_dataset, validate_bundle, write_bundle
from .estimator import MSVARegressor
from .evaluation import EvalReport, evaluate_split, evaluate_video
from .model import ModelConfig, MSVAModel, forward, init_model
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train_fold

__all__ = [
    "Checkpoint",
    "EvalReport",
    "FeatureBundle",
    "FoldSplit",
    "MSVAModel",
    "MSVARegressor",
    "ModelConfig",
    "TrainConfig",
    "evaluate_split",
    "evaluate_video",
    "forward",
    "init_model",
    "load_bundle",
    "load_checkpoint",
    "make_splits",
    "save_checkpoint",
    "synth_dataset",
    "train_fold",
    "validate_bundle",
    "write_bundle",
]

__version__ = "0.1.0"
