"""Inversion-based memorization scores for small pixel-space diffusion models."""
from __future__ import annotations

from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import ToyDataset, make_dataset
from .diffusion import DenoiserConfig, DenoiserModel, SamplerConfig, TrainConfig, ddim_sample, make_schedule, \
    train_denoiser
from .errors import (CalibrationError, CheckpointError, ConfigError, ContractError, InversionError, InvMMError,
                     ManifestError, MetricError, TrainingError)
from .inversion import InversionConfig, InversionResult, fixed_lambda_invert, invert, kl_to_standard
from .kernels import BACKEND
from .metrics import ScoredSet, auc, iou_collation, loss_mi_baseline, tpr_at_fpr
from .promptinv import PromptConfig, discretize, joint_invert
from .replication import ReplicationJudge, calibrate_beta, nearest_neighbor_test

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CalibrationError", "CheckpointError", "ConfigError", "ContractError", "DenoiserConfig",
    "DenoiserModel", "InvMMError", "InversionConfig", "InversionError", "InversionResult", "ManifestError",
    "MetricError", "PromptConfig", "ReplicationJudge", "SamplerConfig", "ScoredSet", "ToyDataset", "TrainConfig",
    "TrainingError", "auc", "calibrate_beta", "ddim_sample", "discretize", "fixed_lambda_invert", "invert",
    "iou_collation", "joint_invert", "kl_to_standard", "load_checkpoint", "loss_mi_baseline", "make_dataset",
    "make_schedule", "nearest_neighbor_test", "save_checkpoint", "tpr_at_fpr", "train_denoiser",
]
