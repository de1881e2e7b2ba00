"""Unsupervised domain adaptation for multispectral land-cover segmentation.

A numpy micro U-Net trained on a labeled source domain, then adapted to an
unlabeled target domain with a shared-weight Siamese pass and dynamic
entropy-ranked pseudo-labels.
"""

from .data import DomainSet, RasterScene, SealedTruth, SynthSpec, generate_domain, stitch_inference
from .dpa import DpaSchedule, assign_pseudo_labels, entropy_map, pseudo_label_batch, selection_budget
from .errors import (
    ConfigurationError,
    DataError,
    DpasegError,
    EvaluationError,
    FormatError,
    NumericError,
    TrainingError,
)
from .estimator import DPASegmenter
from .losses import compute_class_weights, joint_loss, weighted_ce_loss
from .metrics import ConfusionMatrix, accumulate, metrics
from .trainer import TrainConfig, adapt, infer_branch, pretrain_source
from .unet import MicroUNet, UNetConfig, predict_classes

__version__ = "0.1.0"


def class_stats_path():
    """Path of the shipped class-statistics file (published per-class pixel shares)."""
    from importlib.resources import files

    return str(files(__name__) / "resources" / "published_class_stats.txt")


__all__ = [
    "ConfigurationError",
    "ConfusionMatrix",
    "DPASegmenter",
    "DataError",
    "DomainSet",
    "DpaSchedule",
    "DpasegError",
    "EvaluationError",
    "FormatError",
    "MicroUNet",
    "NumericError",
    "RasterScene",
    "SealedTruth",
    "SynthSpec",
    "TrainConfig",
    "TrainingError",
    "UNetConfig",
    "accumulate",
    "adapt",
    "assign_pseudo_labels",
    "compute_class_weights",
    "entropy_map",
    "generate_domain",
    "infer_branch",
    "joint_loss",
    "metrics",
    "predict_classes",
    "pretrain_source",
    "pseudo_label_batch",
    "selection_budget",
    "stitch_inference",
    "class_stats_path",
    "weighted_ce_loss",
]
