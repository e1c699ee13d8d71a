"""Gaze-supervised vision transformers for left/right turn prediction."""

from .estimator import EarlyStopping, GazeViTClassifier
from .exceptions import (
    AuditViolationError,
    DegenerateSplitError,
    GazeViTError,
    InvalidParameterError,
    MissingDataError,
    TrainingDivergedError,
)
from .gaze import FixationMap, FixationReducer, GazeTrace, build_fixation_map, reduce_fixation_map
from .losses import LAMBDA_GRID, fax_backward_check, fax_objective
from .metrics import DummyGazeClassifier, dummy_classify, iou_alignment, mann_whitney_u
from .uncertainty import ContrastUncertainty, contrast_uncertainty, split_by_uncertainty
from .vit import ModelConfig, VisionTransformer, prune_to_depth, reduce_attention

__version__ = "0.1.0"

__all__ = [
    "AuditViolationError",
    "ContrastUncertainty",
    "DegenerateSplitError",
    "DummyGazeClassifier",
    "EarlyStopping",
    "FixationMap",
    "FixationReducer",
    "GazeTrace",
    "GazeViTClassifier",
    "GazeViTError",
    "InvalidParameterError",
    "LAMBDA_GRID",
    "MissingDataError",
    "ModelConfig",
    "TrainingDivergedError",
    "VisionTransformer",
    "build_fixation_map",
    "contrast_uncertainty",
    "dummy_classify",
    "fax_backward_check",
    "fax_objective",
    "iou_alignment",
    "mann_whitney_u",
    "prune_to_depth",
    "reduce_attention",
    "reduce_fixation_map",
    "split_by_uncertainty",
]
