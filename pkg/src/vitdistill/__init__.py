"""Relation, feature and class-token distillation for small vision transformers.

Everything runs on numpy: a reverse-mode autograd core, a pre-norm ViT with
per-block taps, relation matrices, distillation losses, training pipelines and
a command-line harness.
"""

from .data import Dataset, SyntheticDatasetSpec, generate, generate_dataset, load_dataset
from .losses import DistillHeads, LossStrategy, distill_loss
from .pipeline import (DistillPlan, GridSpec, StageChain, TrainSettings, evaluate, pretrain_teacher,
                       run_ablation_grid, run_sequential, select_target_block, train_stage)
from .relations import RelationSet, compute_relations
from .tensor import ContractError, NonFiniteError, ShapeError, Tensor, no_grad
from .vit import ConfigError, MaskSpec, ViTConfig, ViTModel, build_student, with_adaptive_heads

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "Dataset", "DistillHeads", "DistillPlan", "GridSpec", "LossStrategy",
    "MaskSpec", "NonFiniteError", "RelationSet", "ShapeError", "StageChain", "SyntheticDatasetSpec",
    "Tensor", "TrainSettings", "ViTConfig", "ViTModel", "build_student", "compute_relations",
    "distill_loss", "evaluate", "generate", "generate_dataset", "load_dataset", "no_grad",
    "pretrain_teacher", "run_ablation_grid", "run_sequential", "select_target_block", "train_stage",
    "with_adaptive_heads",
]
