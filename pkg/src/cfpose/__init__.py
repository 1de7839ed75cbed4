"""Attention-fused RGB-D 6D pose estimation at desk scale."""

from .ops import AdamState, MLP, Parameter, adam_step, grad_check, linear_project, matmul, row_softmax
from .fusion import (
    STRATEGIES,
    CorrelationParams,
    FeaturePair,
    attention_maps,
    cross_modal_update,
    fuse,
    intra_modal_update,
)
from .pose import DensePrediction, PoseHead, RigidTransform, predict_dense, refine, select_best
from .metrics import (
    AxisSymmetry,
    DiscreteSymmetry,
    EvalRecord,
    ObjectModel,
    accuracy_below,
    add,
    add_s,
    auc,
    report,
)
from .synth import EncoderParams, Scene, encode, make_model, make_scene
from .train import PoseEstimator, PoseRefiner, TrainConfig, ablate, dense_pose_loss, train_estimator, train_refiner

__all__ = [
    "AdamState",
    "AxisSymmetry",
    "CorrelationParams",
    "DensePrediction",
    "DiscreteSymmetry",
    "EncoderParams",
    "EvalRecord",
    "FeaturePair",
    "MLP",
    "ObjectModel",
    "Parameter",
    "PoseEstimator",
    "PoseHead",
    "PoseRefiner",
    "RigidTransform",
    "STRATEGIES",
    "Scene",
    "TrainConfig",
    "ablate",
    "accuracy_below",
    "adam_step",
    "add",
    "add_s",
    "attention_maps",
    "auc",
    "cross_modal_update",
    "dense_pose_loss",
    "encode",
    "fuse",
    "grad_check",
    "intra_modal_update",
    "linear_project",
    "make_model",
    "make_scene",
    "matmul",
    "predict_dense",
    "refine",
    "report",
    "row_softmax",
    "select_best",
    "train_estimator",
    "train_refiner",
]
