"""Self-supervised novel-activity detection for episodic sensor time series.

The pipeline selects dataset-tailored strong augmentations with per-transform
discriminators, trains two contrastive towers (time and frequency domain) on
known activities only, and flags new activities with a nearest-representation
plus transform-classifier score.
"""

from .augment import TransformKind, TransformParams, apply_transform, transform_batch
from .config import RunConfig, config_from_dict, load_config
from .cst import AurocReport, CSTSet, select_cst, select_positive_transform
from .data import (
    DatasetManifest,
    Episode,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    pad_and_mask,
    split_dataset,
    zscore_normalize,
)
from .detect import DetectionScore, ScoringContext, TowerBundle, score_clan, score_dataset
from .encoder import EncoderConfig, ModelParams, adam_step, backward, init_params
from .evaluate import EvalReport, run_multi_class, run_one_class
from .metrics import auroc, balanced_accuracy, roc_points
from .pipeline import PipelineResult, run_single
from .spectral import fft_magnitude, spectral_length
from .training import RepresentationBank, TrainConfig, ViewBatch, build_views, loss_cls, loss_con, train_tower

__version__ = "0.1.0"

__all__ = [
    "AurocReport",
    "CSTSet",
    "DatasetManifest",
    "DetectionScore",
    "EncoderConfig",
    "Episode",
    "EvalReport",
    "ModelParams",
    "PipelineResult",
    "RepresentationBank",
    "RunConfig",
    "ScoringContext",
    "SyntheticSpec",
    "TowerBundle",
    "TrainConfig",
    "TransformKind",
    "TransformParams",
    "ViewBatch",
    "adam_step",
    "apply_transform",
    "auroc",
    "backward",
    "balanced_accuracy",
    "build_views",
    "config_from_dict",
    "fft_magnitude",
    "generate_synthetic",
    "init_params",
    "load_config",
    "load_dataset",
    "loss_cls",
    "loss_con",
    "pad_and_mask",
    "roc_points",
    "run_multi_class",
    "run_one_class",
    "run_single",
    "score_clan",
    "score_dataset",
    "select_cst",
    "select_positive_transform",
    "spectral_length",
    "split_dataset",
    "train_tower",
    "transform_batch",
    "zscore_normalize",
]
