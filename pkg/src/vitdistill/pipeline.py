"""Distillation runs: single stages, sequential chains, evaluation and ablation grids."""

from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tt
from .data import Dataset, batches
from .losses import DistillHeads, LossStrategy, distill_loss
from .optim import AdamW, layerwise_lr_scale, lr_at
from .schemas import CHAIN, GRID, PLAN, validate
from .serialize import checkpoint_hash
from .tensor import NonFiniteError, Tensor
from .vit import BlockTaps, ConfigError, MaskSpec, ViTConfig, ViTModel

log = logging.getLogger(__name__)

BASE_LR = 2.4e-3
BASE_BATCH = 4096


def select_target_block(teacher_depth: int, override: int | None = None) -> int:
    """Teacher block whose taps supervise the student (1-based).

    Without an override this is three quarters of the way up the teacher,
    rounded half up: 18 of 24, 9 of 12.
    """
    if override is not None:
        if not 1 <= override <= teacher_depth:
            raise ConfigError(f"target block {override} outside [1, {teacher_depth}]")
        return int(override)
    return max(1, int(math.floor(0.75 * teacher_depth + 0.5)))


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------

@dataclass
class DistillPlan:
    student_config: ViTConfig
    teacher_checkpoint: str | None = None
    student_init: str | None = None
    target_block_index: int | None = None
    loss_strategy: LossStrategy = field(default_factory=LossStrategy)
    input_mode: str = "raw"
    mask_ratio: float = 0.75
    teacher_drop_path: float = 0.0
    student_drop_path: float | None = None
    epochs: int = 100
    batch_size: int = 64
    peak_lr: float | None = None
    min_lr: float = 1e-5
    warmup_epochs: float = 5.0
    weight_decay: float = 0.05
    seed: int = 0
    cache_teacher: bool = True

    def __post_init__(self):
        if self.input_mode not in ("raw", "masked"):
            raise ConfigError(f"input_mode must be 'raw' or 'masked', got {self.input_mode!r}")
        if self.loss_strategy.with_reconstruction and self.input_mode != "masked":
            raise ConfigError("with_reconstruction needs input_mode 'masked'")

    @property
    def lr(self) -> float:
        if self.peak_lr is not None:
            return self.peak_lr
        return BASE_LR * self.batch_size / BASE_BATCH

    def effective_student_config(self) -> ViTConfig:
        if self.student_drop_path is None:
            return self.student_config
        return replace(self.student_config, drop_path_rate=self.student_drop_path)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["student_config"] = self.student_config.to_dict()
        d["loss_strategy"] = self.loss_strategy.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillPlan":
        validate(d, PLAN)
        d = dict(d)
        d["student_config"] = ViTConfig.from_dict(d["student_config"])
        d["loss_strategy"] = LossStrategy.from_dict(d.get("loss_strategy", {}))
        return cls(**d)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(doc) -> str:
    """Stable short hash of a JSON-compatible document (key order ignored)."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class StageChain:
    stages: list[DistillPlan]

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a chain needs at least one stage")
        if self.stages[0].teacher_checkpoint is None:
            raise ConfigError("stages[0].teacher_checkpoint is required")
        for i in range(1, len(self.stages)):
            if self.stages[i].teacher_checkpoint is not None:
                raise ConfigError(f"stages[{i}].teacher_checkpoint must be null: the teacher is stage {i - 1}'s output")
            check_compatible(self.stages[i - 1].effective_student_config(), self.stages[i],
                             where=f"stages[{i}]")

    @classmethod
    def from_dict(cls, d: dict) -> "StageChain":
        validate(d, CHAIN)
        return cls([DistillPlan.from_dict(s) for s in d["stages"]])

    def to_dict(self) -> dict:
        return {"stages": [s.to_dict() for s in self.stages]}


def check_compatible(teacher: ViTConfig, plan: DistillPlan, where: str = "plan") -> int:
    """Validate a teacher/student pairing and return the target block."""
    s = plan.effective_student_config()
    for name in ("image_size", "patch_size", "in_chans"):
        if getattr(s, name) != getattr(teacher, name):
            raise ConfigError(f"{where}: student {name}={getattr(s, name)} differs from teacher {getattr(teacher, name)}")
    if s.depth > teacher.depth or s.hidden_dim > teacher.hidden_dim:
        raise ConfigError(
            f"{where}: teacher (depth {teacher.depth}, width {teacher.hidden_dim}) must be at least as deep "
            f"and wide as the student (depth {s.depth}, width {s.hidden_dim})")
    target = select_target_block(teacher.depth, plan.target_block_index)
    if plan.loss_strategy.kind == "relation":
        t_heads = teacher.heads_at(target)
        s_heads = s.heads_at(s.depth)
        if t_heads != s_heads:
            raise ConfigError(
                f"{where}: teacher block {target} has {t_heads} heads, student last block has {s_heads}; "
                f"set student_config.adaptive_last_block_heads={t_heads}")
    return target


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricRow:
    step: int
    lr: float
    loss_total: float
    components: dict[str, float]
    wall_ms: float
    eval_acc: float | None = None


def write_metrics_csv(rows: list[MetricRow], path) -> None:
    comps = sorted({k for r in rows for k in r.components})
    with_acc = any(r.eval_acc is not None for r in rows)
    header = ["step", "lr", "loss_total"] + [f"loss_{c}" for c in comps]
    header += (["eval_acc"] if with_acc else []) + ["wall_ms"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            line = [r.step, repr(float(r.lr)), f"{r.loss_total:.8g}"]
            line += [f"{r.components[c]:.8g}" if c in r.components else "" for c in comps]
            if with_acc:
                line.append("" if r.eval_acc is None else f"{r.eval_acc:.6g}")
            line.append(f"{r.wall_ms:.3f}")
            w.writerow(line)


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# single stage
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    student: ViTModel
    metrics: list[MetricRow]
    target_block: int
    checkpoint: Path | None = None
    teacher_hash: str | None = None
    output_hash: str | None = None


_TEACHER_FIELDS = {
    "relation": ("q", "k", "v"),
    "class_token": ("ffn_post",),
}


def _needed_fields(strategy: LossStrategy) -> tuple[str, ...]:
    if strategy.kind == "feature":
        if strategy.feature_target == "qkv":
            return ("q", "k", "v")
        return ("ffn_post",) if strategy.feature_target == "output" else (strategy.feature_target,)
    return _TEACHER_FIELDS[strategy.kind]


def _taps_from_arrays(arrays: dict[str, np.ndarray]) -> BlockTaps:
    vals = {n: (Tensor(arrays[n]) if n in arrays else None)
            for n in ("block_input", "attn_pre", "attn_post", "ffn_pre", "ffn_post", "q", "k", "v")}
    return BlockTaps(**vals)


def _teacher_taps(teacher: ViTModel, images: np.ndarray, target: int, fields, train: bool,
                  rng) -> dict[str, np.ndarray]:
    with tt.no_grad():
        _, taps = teacher.forward_with_taps(images, train=train, rng=rng, upto=target)
    bt = taps.block(target)
    return {n: getattr(bt, n).data for n in fields}


def _cache_teacher(teacher, images, target, fields, chunk: int = 256) -> dict[str, np.ndarray]:
    parts = [_teacher_taps(teacher, images[i:i + chunk], target, fields, False, None)
             for i in range(0, len(images), chunk)]
    return {n: np.concatenate([p[n] for p in parts]) for n in fields}


def _first_bad_block(taps) -> str:
    for i, bt in enumerate(taps.blocks, start=1):
        if not np.isfinite(bt.block_feature.data).all():
            return f"block {i}"
    return "loss head"


def train_stage(plan: DistillPlan, dataset: Dataset, out_dir=None, teacher: ViTModel | None = None,
                on_step=None) -> StageResult:
    """Distil ``teacher`` (or ``plan.teacher_checkpoint``) into a fresh student.

    The teacher is frozen, runs on raw images and, unless
    ``plan.teacher_drop_path`` is set, in evaluation mode.  When ``out_dir``
    is given the plan, metrics and final student checkpoint are written there.
    """
    t_hash = None
    if teacher is None:
        if plan.teacher_checkpoint is None:
            raise ConfigError("plan has no teacher_checkpoint and no teacher was passed")
        teacher = ViTModel.load(plan.teacher_checkpoint)
        t_hash = checkpoint_hash(plan.teacher_checkpoint)
    teacher.set_requires_grad(False)
    target = check_compatible(teacher.config, plan)
    s_cfg = plan.effective_student_config()
    strategy = plan.loss_strategy

    if plan.student_init:
        student = ViTModel.load(plan.student_init)
        if replace(student.config, drop_path_rate=0.0) != replace(s_cfg, drop_path_rate=0.0):
            raise ConfigError("student_init checkpoint config differs from student_config")
        student = student.with_config(s_cfg)
    else:
        student = ViTModel(s_cfg, seed=plan.seed)
    heads = DistillHeads(strategy, s_cfg.hidden_dim, teacher.config.hidden_dim, s_cfg.patch_dim,
                         seed=plan.seed + 1)
    params = {f"student.{n}": p for n, p in student.params.items()}
    params.update(heads.params())
    opt = AdamW(params, weight_decay=plan.weight_decay)

    n = len(dataset)
    steps_per_epoch = math.ceil(n / plan.batch_size)
    total = plan.epochs * steps_per_epoch
    warmup = int(round(plan.warmup_epochs * steps_per_epoch))
    data_rng = np.random.default_rng([plan.seed, 1])
    dp_rng = np.random.default_rng([plan.seed, 2])
    mask_rng = np.random.default_rng([plan.seed, 3])
    teacher_rng = np.random.default_rng([plan.seed, 4])
    fields = _needed_fields(strategy)
    teacher_train = plan.teacher_drop_path > 0
    t_model = teacher.with_config(replace(teacher.config, drop_path_rate=plan.teacher_drop_path))
    cache = None
    if plan.cache_teacher and not teacher_train and total > 0:
        cache = _cache_teacher(t_model, dataset.images, target, fields)

    metrics: list[MetricRow] = []
    step = 0
    for _ in range(plan.epochs):
        for idx in batches(n, plan.batch_size, data_rng):
            t0 = time.perf_counter()
            lr = lr_at(step, total, warmup, plan.lr, plan.min_lr)
            images = dataset.images[idx]
            mask = None
            if plan.input_mode == "masked":
                mask = MaskSpec.random(len(idx), s_cfg.num_patches, plan.mask_ratio,
                                       int(mask_rng.integers(2 ** 31)))
            if cache is not None:
                t_arrays = {k: v[idx] for k, v in cache.items()}
            else:
                t_arrays = _teacher_taps(t_model, images, target, fields, teacher_train, teacher_rng)
            _, s_taps = student.forward_with_taps(images, mask, train=True, rng=dp_rng)
            loss, parts = distill_loss(strategy, s_taps.blocks[-1], _taps_from_arrays(t_arrays), heads,
                                       images, mask, s_cfg.patch_size)
            if not np.isfinite(loss.data).all():
                raise NonFiniteError(f"non-finite loss at step {step} (first bad: {_first_bad_block(s_taps)})")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            row = MetricRow(step, lr, float(loss.data), parts, (time.perf_counter() - t0) * 1e3)
            metrics.append(row)
            if on_step is not None:
                on_step(row)
            step += 1

    result = StageResult(student, metrics, target, teacher_hash=t_hash)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "plan.json").write_text(json.dumps(plan.to_dict(), sort_keys=True, indent=1) + "\n")
        ckpt = out_dir / "checkpoint"
        student.save(ckpt)
        write_metrics_csv(metrics, out_dir / "metrics.csv")
        result.checkpoint = ckpt
        result.output_hash = checkpoint_hash(ckpt)
        summary = {"target_block": target, "steps": len(metrics), "teacher_hash": t_hash,
                   "output_hash": result.output_hash,
                   "final_loss": metrics[-1].loss_total if metrics else None}
        (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return result


def run_sequential(chain: StageChain, dataset: Dataset, out_dir) -> list[StageResult]:
    """Run stages in order; each stage's student becomes the next teacher.

    Every stage writes ``stage_<i>/`` under ``out_dir`` and ``chain.json``
    records teacher and output hashes.  A failing stage stops the chain and
    leaves earlier stages on disk.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: list[StageResult] = []
    entries = []
    prev_ckpt = None
    try:
        for i, plan in enumerate(chain.stages):
            if i > 0:
                plan = replace(plan, teacher_checkpoint=str(prev_ckpt))
            res = train_stage(plan, dataset, out_dir / f"stage_{i}")
            results.append(res)
            entries.append({"stage": i, "teacher_checkpoint": plan.teacher_checkpoint,
                            "teacher_hash": res.teacher_hash, "output_hash": res.output_hash,
                            "checkpoint": str(res.checkpoint)})
            prev_ckpt = res.checkpoint
    finally:
        (out_dir / "chain.json").write_text(
            json.dumps({"stages": entries, "completed": len(entries) == len(chain.stages)},
                       sort_keys=True, indent=1) + "\n")
    return results


# ---------------------------------------------------------------------------
# supervised training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 64
    peak_lr: float = 1e-3
    min_lr: float = 1e-6
    warmup_epochs: float = 2.0
    weight_decay: float = 0.05
    layer_decay: float | None = 0.65
    drop_path_rate: float = 0.1
    label_smoothing: float = 0.1
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainSettings":
        return cls(**(d or {}))


def train_classifier(model: ViTModel, dataset: Dataset, settings: TrainSettings,
                     layer_decay: float | None = None) -> list[MetricRow]:
    """Cross-entropy training of every parameter of ``model`` in place."""
    opt_scale = None
    if layer_decay is not None:
        opt_scale = layerwise_lr_scale(model.params, model.config.depth, layer_decay)
    model.set_requires_grad(True)
    opt = AdamW(model.params, weight_decay=settings.weight_decay, lr_scale=opt_scale)
    n = len(dataset)
    spe = math.ceil(n / settings.batch_size)
    total = settings.epochs * spe
    warmup = int(round(settings.warmup_epochs * spe))
    data_rng = np.random.default_rng([settings.seed, 11])
    dp_rng = np.random.default_rng([settings.seed, 12])
    rows = []
    step = 0
    for _ in range(settings.epochs):
        for idx in batches(n, settings.batch_size, data_rng):
            t0 = time.perf_counter()
            lr = lr_at(step, total, warmup, settings.peak_lr, settings.min_lr)
            logits, _ = model.forward_with_taps(dataset.images[idx], train=True, rng=dp_rng)
            loss = tt.cross_entropy(logits, dataset.labels[idx], settings.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            rows.append(MetricRow(step, lr, float(loss.data), {"ce": float(loss.data)},
                                  (time.perf_counter() - t0) * 1e3))
            step += 1
    return rows


def predict(model: ViTModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with tt.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(images[i:i + batch_size]).data.argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: ViTModel, dataset: Dataset) -> float:
    return float(np.mean(predict(model, dataset.images) == dataset.labels))


def pretrain_teacher(config: ViTConfig, dataset: Dataset, settings: TrainSettings,
                     seed: int = 0) -> ViTModel:
    """Supervised toy teacher; stands in for a masked-image-modelling checkpoint."""
    model = ViTModel(replace(config, drop_path_rate=settings.drop_path_rate), seed=seed)
    train_classifier(model, dataset, settings, layer_decay=None)
    return model.with_config(replace(config, drop_path_rate=0.0))


def _linear_probe(model: ViTModel, train: Dataset, test: Dataset, settings: TrainSettings) -> float:
    feats = model.features(train.images)
    test_feats = model.features(test.images)
    rng = np.random.default_rng([settings.seed, 21])
    d, c = feats.shape[1], train.num_classes
    w = tt.parameter(np.zeros((d, c), dtype=np.float32))
    b = tt.parameter(np.zeros(c, dtype=np.float32))
    opt = AdamW({"w": w, "b": b}, weight_decay=settings.weight_decay)
    n = len(train)
    spe = math.ceil(n / settings.batch_size)
    total = settings.epochs * spe
    warmup = int(round(settings.warmup_epochs * spe))
    step = 0
    for _ in range(settings.epochs):
        for idx in batches(n, settings.batch_size, rng):
            logits = tt.linear(Tensor(feats[idx]), w, b)
            loss = tt.cross_entropy(logits, train.labels[idx], settings.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(step, total, warmup, settings.peak_lr, settings.min_lr))
            step += 1
    pred = (test_feats @ w.data + b.data).argmax(axis=-1)
    return float(np.mean(pred == test.labels))


def evaluate(model, train: Dataset, test: Dataset, mode: str = "fine_tune",
             settings: TrainSettings | None = None) -> float:
    """Top-1 test accuracy after a linear probe or a full fine-tune.

    ``model`` may be a :class:`ViTModel` or a checkpoint directory; it is not
    modified.  Fine-tuning uses layer-wise learning-rate decay.
    """
    settings = settings or TrainSettings()
    if not isinstance(model, ViTModel):
        model = ViTModel.load(model)
    if mode == "linear_probe":
        return _linear_probe(model, train, test, settings)
    if mode != "fine_tune":
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    ft = model.copy().with_config(replace(model.config, drop_path_rate=settings.drop_path_rate))
    train_classifier(ft, train, settings, layer_decay=settings.layer_decay)
    return accuracy(ft, test)


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------

def set_path(doc: dict, path: str, value) -> None:
    keys = path.split(".")
    cur = doc
    for k in keys[:-1]:
        if not isinstance(cur.get(k), dict):
            cur[k] = {}
        cur = cur[k]
    cur[keys[-1]] = value


def expand_grid(axes: dict[str, list]) -> list[dict]:
    """Cartesian product of axis values as flat ``path -> value`` override dicts.

    A dict-valued entry sets several paths at once, which lets one axis hold
    rows that are not a full product (e.g. teacher and student drop path).
    """
    names = list(axes)
    cells = []
    for combo in itertools.product(*(axes[a] for a in names)):
        overrides = {}
        for name, value in zip(names, combo):
            if isinstance(value, dict):
                overrides.update(value)
            else:
                overrides[name] = value
        cells.append(overrides)
    return cells


@dataclass
class GridSpec:
    base_plan: dict
    axes: dict[str, list]
    eval_mode: str = "fine_tune"
    eval: TrainSettings = field(default_factory=TrainSettings)
    eval_train_samples: int | None = None
    name: str = "grid"

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        validate(d, GRID)
        d = copy.deepcopy(d)
        d["eval"] = TrainSettings.from_dict(d.get("eval"))
        spec = cls(**d)
        for overrides in expand_grid(spec.axes):
            spec.cell_plan(overrides)
        return spec

    def cell_plan(self, overrides: dict) -> DistillPlan:
        doc = copy.deepcopy(self.base_plan)
        for path, value in overrides.items():
            set_path(doc, path, value)
        return DistillPlan.from_dict(doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def _run_cell(args):
    i, overrides, plan, dataset, eval_train, eval_test, spec, cell_dir = args
    row = {"cell": i, **{k: _label(v) for k, v in overrides.items()}}
    try:
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "cell.json").write_text(json.dumps({"cell": i, "overrides": overrides},
                                                       sort_keys=True, indent=1) + "\n")
        res = train_stage(plan, dataset, cell_dir)
        acc = evaluate(res.student, eval_train, eval_test, spec.eval_mode, spec.eval)
        row.update(status="ok", accuracy=acc,
                   final_loss=res.metrics[-1].loss_total if res.metrics else None)
    except Exception as exc:  # cells fail independently
        log.warning("grid cell %d failed: %s", i, exc)
        row.update(status=f"failed: {type(exc).__name__}: {exc}", accuracy=None, final_loss=None)
    # insertion order keeps the axis columns in grid order for ``report``
    (cell_dir / "result.json").write_text(json.dumps(row, indent=1) + "\n")
    return row


def _label(v):
    if isinstance(v, (list, tuple)):
        return "/".join(str(x) for x in v)
    return v


def run_ablation_grid(spec: GridSpec, dataset: Dataset, eval_train: Dataset, eval_test: Dataset,
                      out_dir, workers: int = 1) -> list[dict]:
    """One distil + evaluate per grid cell; writes ``results.csv`` and ``table.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "grid.json").write_text(json.dumps(_grid_doc(spec), sort_keys=True, indent=1) + "\n")
    if spec.eval_train_samples is not None:
        eval_train = eval_train.subset(np.arange(min(spec.eval_train_samples, len(eval_train))))
    jobs = []
    for i, overrides in enumerate(expand_grid(spec.axes)):
        jobs.append((i, overrides, spec.cell_plan(overrides), dataset, eval_train, eval_test, spec,
                     out_dir / f"cell_{i:03d}"))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    write_grid_outputs(rows, out_dir)
    return rows


def _grid_doc(spec: GridSpec) -> dict:
    d = {"name": spec.name, "base_plan": spec.base_plan, "axes": spec.axes, "eval_mode": spec.eval_mode,
         "eval": asdict(spec.eval)}
    if spec.eval_train_samples is not None:
        d["eval_train_samples"] = spec.eval_train_samples
    return d


def grid_columns(rows: list[dict]) -> list[str]:
    fixed = {"cell", "status", "accuracy", "final_loss"}
    cols = []
    for r in rows:
        for k in r:
            if k not in fixed and k not in cols:
                cols.append(k)
    return ["cell"] + cols + ["accuracy", "final_loss", "status"]


def format_table(rows: list[dict], columns: list[str]) -> str:
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(line[i]) for line in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    head = " | ".join(c.ljust(w) for c, w in zip(columns, widths))
    sep = "-+-".join("-" * w for w in widths)
    body = [" | ".join(v.ljust(w) for v, w in zip(line, widths)) for line in cells]
    return "\n".join([head, sep, *body]) + "\n"


def write_grid_outputs(rows: list[dict], out_dir) -> None:
    out_dir = Path(out_dir)
    cols = grid_columns(rows)
    with open(out_dir / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c) for c in cols})
    (out_dir / "table.txt").write_text(format_table(rows, cols))
