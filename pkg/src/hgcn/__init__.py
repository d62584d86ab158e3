"""Hierarchical graph capsule network for graph classification, on a small
numpy autodiff engine."""

from .graphs import Dataset, GraphInstance, make_folds, parse_tudataset
from .model import ModelConfig, forward, init_params, predict
from .objectives import MarginConfig, ObjectiveConfig, total_objective
from .train import ExperimentConfig, TrainConfig, cross_validate, train_fold

__all__ = [
    "Dataset", "GraphInstance", "make_folds", "parse_tudataset",
    "ModelConfig", "forward", "init_params", "predict",
    "MarginConfig", "ObjectiveConfig", "total_objective",
    "ExperimentConfig", "TrainConfig", "cross_validate", "train_fold",
]
