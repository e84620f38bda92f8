"""Multimodal contrastive click-fraud detection on numpy."""
__version__ = "0.1.0"

from .config import MccfConfig, load_config
from .data import ClickRecord, FeatureBatch, HeteroGraph, load_dataset, save_dataset
from .errors import (ConfigError, ContractError, DimensionError, MccfError, NumericError,
                     ParseError, SamplingError)
from .metrics import MetricsReport, auc
from .model import ModelConfig, MccfParams, init_params, load_params, mccf_forward, save_params
from .pca import pca_project
from .synth import GenConfig, generate_dataset, validate_statistics
from .train import TrainConfig, ablation_run, evaluate, prepare, run_experiment, train

__all__ = [
    "ClickRecord", "ConfigError", "ContractError", "DimensionError", "FeatureBatch", "GenConfig",
    "HeteroGraph", "MccfConfig", "MccfError", "MccfParams", "MetricsReport", "ModelConfig",
    "NumericError", "ParseError", "SamplingError", "TrainConfig", "ablation_run", "auc", "evaluate",
    "generate_dataset", "init_params", "load_config", "load_dataset", "load_params", "mccf_forward",
    "pca_project", "prepare", "run_experiment", "save_dataset", "save_params", "train",
    "validate_statistics",
]
