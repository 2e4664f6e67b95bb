"""Desk-scale comparison of relation distillation, feature distillation and scratch training.

A supervised toy teacher (depth 6, width 96) is trained once on the synthetic
shapes task.  For each seed a depth-3, width-48 student is distilled from it
with relation losses and with Q/K/V feature losses, then fine-tuned on a small
labelled subset next to an identically initialised scratch student.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .data import SyntheticDatasetSpec, generate
from .losses import LossStrategy
from .pipeline import DistillPlan, TrainSettings, accuracy, evaluate, pretrain_teacher, train_stage
from .vit import ViTConfig, ViTModel, with_adaptive_heads

log = logging.getLogger(__name__)

TEACHER = ViTConfig(depth=6, hidden_dim=96, heads=6, patch_size=4, image_size=16, num_classes=4)
STUDENT = ViTConfig(depth=3, hidden_dim=48, heads=3, patch_size=4, image_size=16, num_classes=4)


@dataclass
class ComparisonSetup:
    num_samples: int = 6000
    num_train: int = 4000          # distillation pool; the rest is the test split
    finetune_samples: int = 200    # labelled subset used for fine-tuning
    data_seed: int = 0
    teacher_settings: TrainSettings = field(default_factory=lambda: TrainSettings(
        epochs=15, peak_lr=1e-3, warmup_epochs=2, drop_path_rate=0.1))
    distill_epochs: int = 10
    distill_lr: float = 1e-3
    distill_warmup: float = 1.0
    student_drop_path: float = 0.1
    finetune: TrainSettings = field(default_factory=lambda: TrainSettings(
        epochs=50, peak_lr=2e-3, warmup_epochs=3, batch_size=32))


@dataclass
class SeedResult:
    seed: int
    relation: float
    feature: float
    scratch: float
    seconds: float


def _plan(config: ViTConfig, strategy: LossStrategy, setup: ComparisonSetup, seed: int) -> DistillPlan:
    return DistillPlan(student_config=config, loss_strategy=strategy, epochs=setup.distill_epochs,
                       peak_lr=setup.distill_lr, warmup_epochs=setup.distill_warmup, seed=seed,
                       student_drop_path=setup.student_drop_path)


def prepare(setup: ComparisonSetup):
    """Dataset splits and the trained teacher; returns ``(train, finetune, test, teacher, teacher_acc)``."""
    ds, _ = generate(SyntheticDatasetSpec(num_samples=setup.num_samples, image_size=TEACHER.image_size,
                                          num_classes=TEACHER.num_classes, seed=setup.data_seed))
    train, test = ds.split(setup.num_train)
    finetune = train.subset(np.arange(setup.finetune_samples))
    teacher = pretrain_teacher(TEACHER, train, setup.teacher_settings, seed=setup.data_seed)
    return train, finetune, test, teacher, accuracy(teacher, test)


def run_seed(seed: int, train, finetune, test, teacher: ViTModel, setup: ComparisonSetup) -> SeedResult:
    t0 = time.perf_counter()
    ft = TrainSettings(**{**setup.finetune.__dict__, "seed": seed})
    rel_plan = _plan(with_adaptive_heads(STUDENT, TEACHER.heads), LossStrategy(kind="relation"), setup, seed)
    feat_plan = _plan(STUDENT, LossStrategy(kind="feature", feature_target="qkv"), setup, seed)
    rel = evaluate(train_stage(rel_plan, train, teacher=teacher).student, finetune, test, "fine_tune", ft)
    feat = evaluate(train_stage(feat_plan, train, teacher=teacher).student, finetune, test, "fine_tune", ft)
    scratch = evaluate(ViTModel(STUDENT, seed=seed), finetune, test, "fine_tune", ft)
    res = SeedResult(seed, rel, feat, scratch, time.perf_counter() - t0)
    log.info("seed %d: relation %.4f feature %.4f scratch %.4f (%.0fs)", seed, rel, feat, scratch, res.seconds)
    return res


def medians(results: list[SeedResult]) -> dict[str, float]:
    return {k: statistics.median(getattr(r, k) for r in results) for k in ("relation", "feature", "scratch")}


def run_comparison(seeds=(0, 1, 2, 3, 4), setup: ComparisonSetup | None = None):
    """Per-seed fine-tune accuracies plus medians and the teacher's test accuracy."""
    setup = setup or ComparisonSetup()
    train, finetune, test, teacher, teacher_acc = prepare(setup)
    results = [run_seed(s, train, finetune, test, teacher, setup) for s in seeds]
    return results, medians(results), teacher_acc
