"""Multi-task time-series prediction with uncertainty-gated asymmetric
knowledge transfer across tasks and timesteps."""

from .autodiff import Tensor, no_grad, parameter, set_default_dtype
from .data import (DatasetSplit, SyntheticSpec, TransferRelation,
                   generate_imbalanced_tasks, generate_temporal_tasks,
                   ingest_csv)
from .errors import (ConfigError, CrosstaskError, DimensionError,
                     IngestionError, NonFiniteError, UndefinedCorrelationError,
                     UndefinedMetricError)
from .estimators import MultiTaskSequenceClassifier
from .evaluate import (ResultTable, UncertaintyTrace, aggregate, auroc,
                       negative_transfer_report,
                       uncertainty_transfer_correlation)
from .model import EpisodeBatch, LatentDistribution, ModelConfig, TransferModel
from .rng import RngStream
from .train import RunRecord, TrainConfig, fit, grid_search
from .transfer import TransferGraph, normalized_incoming, normalized_outgoing
from .variants import VariantSpec, build

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "parameter", "set_default_dtype",
    "DatasetSplit", "SyntheticSpec", "TransferRelation",
    "generate_imbalanced_tasks", "generate_temporal_tasks", "ingest_csv",
    "ConfigError", "CrosstaskError", "DimensionError", "IngestionError",
    "NonFiniteError", "UndefinedCorrelationError", "UndefinedMetricError",
    "MultiTaskSequenceClassifier",
    "ResultTable", "UncertaintyTrace", "aggregate", "auroc",
    "negative_transfer_report", "uncertainty_transfer_correlation",
    "EpisodeBatch", "LatentDistribution", "ModelConfig", "TransferModel",
    "RngStream", "RunRecord", "TrainConfig", "fit", "grid_search",
    "TransferGraph", "normalized_incoming", "normalized_outgoing",
    "VariantSpec", "build",
]
