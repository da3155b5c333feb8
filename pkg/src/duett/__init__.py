"""Dual event/time Transformer for sparse, irregularly sampled multivariate time series."""

from .binning import BinnedData, BinnedStay, bin_dataset, bin_stay, bin_times
from .config import RunConfig, load_config, parse_config
from .data import (
    EventTriplet,
    LabelRule,
    Link,
    NormStats,
    PatientStay,
    SynthConfig,
    apply_norm,
    fit_norm,
    generate_synthetic,
    parse_stays,
    split,
)
from .embedding import InputEmbedding, TimeCVE, count_bin
from .finetune import ClsHead, classify, finetune, reconstruct_masked, weighted_bce
from .metrics import EvalReport, pr_auc, roc_auc
from .model import DuETT, ModelConfig
from .optim import LrSchedule, OptState, adamw_step, lr_at
from .ssl import MaskSpec, SslHeads, apply_mask, pretrain, sample_mask, ssl_loss
from .tensor import Tensor, grad, precision

__version__ = "0.1.0"

__all__ = [
    "BinnedData",
    "BinnedStay",
    "bin_dataset",
    "bin_stay",
    "bin_times",
    "RunConfig",
    "load_config",
    "parse_config",
    "EventTriplet",
    "LabelRule",
    "Link",
    "NormStats",
    "PatientStay",
    "SynthConfig",
    "apply_norm",
    "fit_norm",
    "generate_synthetic",
    "parse_stays",
    "split",
    "InputEmbedding",
    "TimeCVE",
    "count_bin",
    "ClsHead",
    "classify",
    "finetune",
    "reconstruct_masked",
    "weighted_bce",
    "EvalReport",
    "pr_auc",
    "roc_auc",
    "DuETT",
    "ModelConfig",
    "LrSchedule",
    "OptState",
    "adamw_step",
    "lr_at",
    "MaskSpec",
    "SslHeads",
    "apply_mask",
    "pretrain",
    "sample_mask",
    "ssl_loss",
    "Tensor",
    "grad",
    "precision",
]
