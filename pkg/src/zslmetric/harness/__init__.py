"""Datasets, configuration, training loop, checkpoints and the command line."""

from .checkpoint import load_model, save_model
from .config import ExperimentConfig
from .data import Dataset, ZslSplit, load_idx, synth_dataset, zsl_split
from .model import ZslModel
from .training import TrainResult, evaluate, train

__all__ = ["Dataset", "ExperimentConfig", "TrainResult", "ZslModel", "ZslSplit", "evaluate",
           "load_idx", "load_model", "save_model", "synth_dataset", "train", "zsl_split"]
