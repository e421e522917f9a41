"""Disaggregate response-level labels into sentence-level scores.

Bags of instance embeddings carry one aggregate label (MIN, MAX or AVG of the
hidden instance labels).  An MLP instance scorer is trained with a bag loss
over a differentiable aggregation, optionally augmented with prior losses,
and can then be refined by bag-consistent pseudo-labeling and retraining.
"""

from disagg.aggregation import AggConfig, aggregate, avg, soft_max, soft_min
from disagg.data import (
    Bag,
    Dataset,
    Instance,
    PreferencePair,
    generate_preferences,
    generate_synthetic,
    load_dataset,
    load_preferences,
    validate_consistency,
    write_dataset,
    write_preferences,
)
from disagg.losses import LossWeights, total_loss
from disagg.model import ScorerModel, init_model
from disagg.pseudolabel import pslab_applicability, pslab_bag, pslab_dataset
from disagg.training import TrainConfig, train, train_response_level, train_supervised

__all__ = [
    "AggConfig",
    "Bag",
    "Dataset",
    "Instance",
    "LossWeights",
    "PreferencePair",
    "ScorerModel",
    "TrainConfig",
    "aggregate",
    "avg",
    "generate_preferences",
    "generate_synthetic",
    "init_model",
    "load_dataset",
    "load_preferences",
    "pslab_applicability",
    "pslab_bag",
    "pslab_dataset",
    "soft_max",
    "soft_min",
    "total_loss",
    "train",
    "train_response_level",
    "train_supervised",
    "validate_consistency",
    "write_dataset",
    "write_preferences",
]
