"""Few-shot class-incremental semantic segmentation.

Novel classes are learned from a handful of labelled images; their labels are
propagated to scene-level nearest neighbours in an unlabelled pool, and old
classes are retained by distilling from the previous model.
"""
from .datamodel import IGNORE, TaskSchedule, build_task_schedule, sample_few_shot
from .kernels import BACKEND
from .losses import LossWeights, distillation_loss, masked_cross_entropy, total_objective
from .network import ModelSnapshot, build_model, extend_head, forward, restore, snapshot
from .trainer import TrainConfig, run_experiment, run_incremental_step, train_base

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "IGNORE",
    "LossWeights",
    "ModelSnapshot",
    "TaskSchedule",
    "TrainConfig",
    "build_model",
    "build_task_schedule",
    "distillation_loss",
    "extend_head",
    "forward",
    "masked_cross_entropy",
    "restore",
    "run_experiment",
    "run_incremental_step",
    "sample_few_shot",
    "snapshot",
    "total_objective",
    "train_base",
]
