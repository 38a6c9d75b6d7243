"""Losses, volume head, optimizer and the training loops."""

from .head import HeadParams, head_backward, head_forward, init_head
from .losses import LossWeights, loss_depth, loss_normal, loss_semantic, loss_semantic_probs
from .optim import OptimConfig, OptimizerState, adam_step
from .pipeline import (
    DivergenceError, FieldSet, FitResult, Frame, TrainConfig, TrainTargets, ViewTargets, fit_scene,
    targets_from_scene, total_loss, train_feedforward,
)

__all__ = [
    "HeadParams", "head_forward", "head_backward", "init_head", "LossWeights", "loss_depth", "loss_normal",
    "loss_semantic", "loss_semantic_probs", "OptimConfig", "OptimizerState", "adam_step", "DivergenceError",
    "FieldSet", "FitResult", "Frame", "TrainConfig", "TrainTargets", "ViewTargets", "fit_scene",
    "targets_from_scene", "total_loss", "train_feedforward",
]
