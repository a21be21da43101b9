"""Desk-scale lab for out-of-distribution generalization of graph classifiers."""

from .errors import (
    ConfigError,
    ContractError,
    GraphshiftError,
    MetricUndefinedError,
    ShapeError,
    TrainingDivergedError,
)
from .genmetrics import FeatureMatrix, MetricsReport, analyze
from .graphdata import Graph, SplitBundle, generate_dataset, load_bundle, save_bundle
from .harness import ExperimentConfig, config_from_dict, run_seed_grid, run_training

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "ExperimentConfig",
    "FeatureMatrix",
    "Graph",
    "GraphshiftError",
    "MetricUndefinedError",
    "MetricsReport",
    "ShapeError",
    "SplitBundle",
    "TrainingDivergedError",
    "analyze",
    "config_from_dict",
    "generate_dataset",
    "load_bundle",
    "run_seed_grid",
    "run_training",
    "save_bundle",
    "__version__",
]
