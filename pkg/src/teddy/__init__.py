"""Weakly supervised incremental segmentation on synthetic shape scenes."""

from .core import ClassSpace, ScoreMap, Semantics, bce, clamp_unit, logistic, one_hot
from .data import (
    DatasetConfig,
    GtAccessError,
    ImageSample,
    SplitMode,
    StepDataset,
    gen_shapes,
    load_dataset,
    load_step_dataset,
    save_dataset,
    save_step_dataset,
    split_incremental,
)
from .masks import BinaryMaskSet, MaskProvenance, oracle_masks, partition_components
from .localizer import PoolingConfig, SeedMap, gwp_pool, loss_cls, loss_loc, seed_scores
from .binarize import BinaryPrediction, MaskAssignment, PredictionSource, assign_masks, binarize
from .tme import TmeReport, tme_check, tme_enforce
from .fusion import (
    FusionConfig,
    FusionCoefficients,
    PseudoLabelBundle,
    assemble_supervision,
    build_bundle,
    closed_form_check,
    fuse_predictions,
    loss_seg,
    oracle_uv,
    soft_pseudo_labels,
    solve_uv,
)
from .trainer import (
    LinearHead,
    LossReport,
    ToyModel,
    TrainConfig,
    TrainingDivergedError,
    check_gradients,
    compute_gradients,
    load_model,
    model_forward,
    poly_lr,
    run_increment,
    run_step0,
    save_model,
    sgd_step,
)
from .metrics import MetricsReport, evaluate_model, forgetting, miou, predict_labelmap

__version__ = "0.1.0"

__all__ = [
    "BinaryMaskSet",
    "BinaryPrediction",
    "ClassSpace",
    "DatasetConfig",
    "FusionCoefficients",
    "FusionConfig",
    "GtAccessError",
    "ImageSample",
    "LinearHead",
    "LossReport",
    "MaskAssignment",
    "MaskProvenance",
    "MetricsReport",
    "PoolingConfig",
    "PredictionSource",
    "PseudoLabelBundle",
    "ScoreMap",
    "SeedMap",
    "Semantics",
    "SplitMode",
    "StepDataset",
    "TmeReport",
    "ToyModel",
    "TrainConfig",
    "TrainingDivergedError",
    "assemble_supervision",
    "assign_masks",
    "bce",
    "binarize",
    "build_bundle",
    "check_gradients",
    "clamp_unit",
    "closed_form_check",
    "compute_gradients",
    "evaluate_model",
    "forgetting",
    "fuse_predictions",
    "gen_shapes",
    "gwp_pool",
    "load_dataset",
    "load_model",
    "load_step_dataset",
    "logistic",
    "loss_cls",
    "loss_loc",
    "loss_seg",
    "miou",
    "model_forward",
    "one_hot",
    "oracle_masks",
    "oracle_uv",
    "partition_components",
    "poly_lr",
    "predict_labelmap",
    "run_increment",
    "run_step0",
    "save_dataset",
    "save_model",
    "save_step_dataset",
    "seed_scores",
    "sgd_step",
    "soft_pseudo_labels",
    "solve_uv",
    "split_incremental",
    "tme_check",
    "tme_enforce",
]
