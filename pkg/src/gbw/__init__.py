"""Gradient-based class weighting for imbalanced dense prediction, at desk scale."""

__version__ = "0.1.0"

from .errors import DivergedRunError, EmptyBatchError, InvalidInputError, UnsupportedSizeError
from .gradients import GradientNorms, class_gradient_norms, class_logit_jacobian
from .losses import IGNORE, PerClassLoss, per_class_loss
from .metrics import ConfusionMatrix, accumulate, iou, recall_precision
from .model import MicroModel, SgdConfig
from .qp import ClassWeights, QpProblem, oracle_solve_active_set, solve_gbw_qp
from .synth import SceneSpec, generate
from .trainer import TrainPlan, run_ablation, train
from .weighting import GbwConfig, gbw_step, static_weight_strategies

__all__ = [
    "ClassWeights", "ConfusionMatrix", "DivergedRunError", "EmptyBatchError", "GbwConfig",
    "GradientNorms", "IGNORE", "InvalidInputError", "MicroModel", "PerClassLoss", "QpProblem",
    "SceneSpec", "SgdConfig", "TrainPlan", "UnsupportedSizeError", "accumulate",
    "class_gradient_norms", "class_logit_jacobian", "gbw_step", "generate", "iou",
    "oracle_solve_active_set", "per_class_loss", "recall_precision", "run_ablation",
    "solve_gbw_qp", "static_weight_strategies", "train",
]
