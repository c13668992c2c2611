"""Soft-prompt transfer across tasks and models, on miniature numpy backbones."""

from .cross_task import SpeedupReport, TransferMatrix, select_source, tpt_task, zero_shot_matrix
from .indicators import (activation_state, c_average, c_concat, e_average, e_concat, indicator_report, on_intersection,
                         on_metric, spearman)
from .model import ModelHandle, ModelSpec, freeze, init_model, load_model, pretrain, save_model
from .projector import Projector, project, tpt_model, train_distance_minimizing, train_task_tuning
from .tasks import Suite, build_suite, default_vocab, evaluate
from .tuning import SoftPrompt, TrainCurve, TuneConfig, detect_convergence, init_prompt, tune

__version__ = "0.1.0"

__all__ = [
    "ModelHandle", "ModelSpec", "Projector", "SoftPrompt", "SpeedupReport", "Suite", "TrainCurve", "TransferMatrix",
    "TuneConfig", "activation_state", "build_suite", "c_average", "c_concat", "default_vocab", "detect_convergence",
    "e_average", "e_concat", "evaluate", "freeze", "indicator_report", "init_model", "init_prompt", "load_model",
    "on_intersection", "on_metric", "pretrain", "project", "save_model", "select_source", "spearman", "tpt_model",
    "tpt_task", "train_distance_minimizing", "train_task_tuning", "tune", "zero_shot_matrix",
]
