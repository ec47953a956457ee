"""Variant effect prediction with graph neural networks over a gene/variant graph."""

from .estimator import VEGNClassifier
from .graph import EdgeType, HeteroGraph, VariantRecord, attach_variants, build_graph, neighbors
from .layers import ModelConfig, VEGNModel, model_forward
from .metrics import auroc, pair_count_auroc
from .trainer import TrainConfig, train

__all__ = [
    "EdgeType",
    "HeteroGraph",
    "ModelConfig",
    "TrainConfig",
    "VEGNClassifier",
    "VEGNModel",
    "VariantRecord",
    "attach_variants",
    "auroc",
    "build_graph",
    "model_forward",
    "neighbors",
    "pair_count_auroc",
    "train",
]

__version__ = "0.1.0"
