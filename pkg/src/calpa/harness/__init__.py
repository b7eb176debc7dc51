"""Desk-scale data, training and evaluation."""

from calpa.harness.checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from calpa.harness.data import Dataset, DatasetSpec, generate_dataset, in_memory_dataset, load_dataset, to_input
from calpa.harness.finetune import finetune, slice_by_plan
from calpa.harness.metrics import Metrics, compute_metrics, evaluate, p_e, p_fa_at, roc
from calpa.harness.train import TrainConfig, TrainingDiverged, TrainResult, accuracy, train
from calpa.harness.validate import SplitValidator

__all__ = [
    "Dataset",
    "DatasetSpec",
    "Metrics",
    "ModelCheckpoint",
    "SplitValidator",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "accuracy",
    "compute_metrics",
    "evaluate",
    "finetune",
    "generate_dataset",
    "in_memory_dataset",
    "load_checkpoint",
    "load_dataset",
    "p_e",
    "p_fa_at",
    "roc",
    "save_checkpoint",
    "slice_by_plan",
    "to_input",
]
