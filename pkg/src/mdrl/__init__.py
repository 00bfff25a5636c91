"""Multi-distribution class representations for semantic segmentation."""

__version__ = "0.1.0"

from .bank import (  # noqa: E402
    AssignmentMatrix,
    BankConfig,
    DistributionBank,
    SinkhornParams,
    cluster_batch,
    init_bank,
    nearest_distribution,
    sinkhorn_assign,
    update_bank,
)
from .config import TrainConfig  # noqa: E402
from .data import ConfusionMatrix, Sample, SynthSpec, accumulate, generate, miou  # noqa: E402
from .estimator import MDRLSegmenter  # noqa: E402
from .losses import LossBreakdown, LossConfig, loss_ce, loss_cgcl, loss_clcl, total_loss  # noqa: E402

__all__ = [
    "AssignmentMatrix",
    "BankConfig",
    "ConfusionMatrix",
    "DistributionBank",
    "LossBreakdown",
    "LossConfig",
    "MDRLSegmenter",
    "Sample",
    "SinkhornParams",
    "SynthSpec",
    "TrainConfig",
    "accumulate",
    "cluster_batch",
    "generate",
    "init_bank",
    "loss_ce",
    "loss_cgcl",
    "loss_clcl",
    "miou",
    "nearest_distribution",
    "sinkhorn_assign",
    "total_loss",
    "update_bank",
]
