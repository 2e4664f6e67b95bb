"""Distillation losses: KL, class token, whitened feature, relation, reconstruction."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tt
from .relations import PAIRS, RelationSet, compute_relations
from .tensor import DTYPE, ContractError, Tensor, make_op
from .vit import BlockTaps, ConfigError, MaskSpec, patchify, trunc_normal

KL_CLAMP = 1e-8
KINDS = ("class_token", "feature", "relation")
FEATURE_TARGETS = ("output", "ffn_pre", "ffn_post", "attn_pre", "attn_post", "qkv")


@dataclass(frozen=True)
class LossStrategy:
    kind: str = "relation"
    feature_target: str = "qkv"
    relation_pairs: tuple = ("QK", "VV")
    relation_softmax: bool = True
    with_reconstruction: bool = False
    class_token_temperature: float = 1.0
    exclude_cls: bool = False
    # layer norm without affine on the student feature ahead of the projection
    student_feature_norm: bool = True
    reconstruction_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"loss kind must be one of {KINDS}, got {self.kind!r}")
        if self.feature_target not in FEATURE_TARGETS:
            raise ConfigError(f"feature_target must be one of {FEATURE_TARGETS}, got {self.feature_target!r}")
        pairs = tuple(p.upper() for p in self.relation_pairs)
        object.__setattr__(self, "relation_pairs", pairs)
        if self.kind == "relation" and not pairs:
            raise ConfigError("relation distillation needs at least one relation pair")
        bad = [p for p in pairs if p not in PAIRS]
        if bad:
            raise ConfigError(f"unknown relation pairs {bad}; choose from {PAIRS}")
        if self.class_token_temperature <= 0:
            raise ConfigError("class_token_temperature must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["relation_pairs"] = list(self.relation_pairs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossStrategy":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown LossStrategy fields: {sorted(extra)}")
        d = dict(d)
        if "relation_pairs" in d:
            d["relation_pairs"] = tuple(d["relation_pairs"])
        return cls(**d)


# ---------------------------------------------------------------------------
# primitive losses
# ---------------------------------------------------------------------------

def kl_loss(p: Tensor, t: Tensor) -> Tensor:
    """Mean over rows of ``sum(t * log(t / p))`` along the last axis.

    ``p`` is clamped at 1e-8; ``0 * log 0`` counts as 0.  Target rows must sum
    to 1 within 1e-4.
    """
    p, t = tt.ensure_tensor(p), tt.ensure_tensor(t)
    if p.shape != t.shape:
        raise tt.ShapeError(f"kl_loss shapes differ: {p.shape} vs {t.shape}")
    td, pd = t.data, p.data
    sums = td.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= 1e-4):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ContractError(f"kl_loss target rows must sum to 1 (worst deviation {worst:.3g})")
    pc = np.maximum(pd, DTYPE(KL_CLAMP))
    pos = td > 0
    safe_t = np.where(pos, td, 1).astype(DTYPE)
    log_ratio = np.where(pos, np.log(safe_t) - np.log(pc), 0).astype(DTYPE)
    rows = sums.size
    value = np.asarray((td * log_ratio).sum(dtype=np.float64) / rows, dtype=DTYPE)

    def back(g):
        g = DTYPE(g) / DTYPE(rows)
        gp = None
        if p.requires_grad:
            gp = np.where(pd > KL_CLAMP, -td / pc, 0).astype(DTYPE) * g
        gt = None
        if t.requires_grad:
            gt = np.where(pos, log_ratio + 1, 0).astype(DTYPE) * g
        return gp, gt

    return make_op(value, (p, t), back, "kl")


def smooth_l1(y_hat: Tensor, y: Tensor, beta: float = 2.0) -> Tensor:
    """Mean of ``0.5 d^2 / beta`` where ``|d| <= beta`` else ``|d| - beta / 2``."""
    y_hat, y = tt.ensure_tensor(y_hat), tt.ensure_tensor(y)
    if y_hat.shape != y.shape:
        raise tt.ShapeError(f"smooth_l1 shapes differ: {y_hat.shape} vs {y.shape}")
    d = y_hat.data - y.data
    ad = np.abs(d)
    small = ad <= beta
    vals = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = d.size
    value = np.asarray(vals.sum(dtype=np.float64) / n, dtype=DTYPE)

    def back(g):
        gd = np.where(small, d / DTYPE(beta), np.sign(d)).astype(DTYPE) * (DTYPE(g) / DTYPE(n))
        return (gd if y_hat.requires_grad else None), (-gd if y.requires_grad else None)

    return make_op(value, (y_hat, y), back, "smooth_l1")


def whiten(x: Tensor) -> Tensor:
    """Layer norm over the last axis with no learnable gain or bias."""
    return tt.layer_norm(x)


# ---------------------------------------------------------------------------
# heads used only while distilling
# ---------------------------------------------------------------------------

class ProjectionHead:
    """Linear map from student width to teacher width.

    Starts as the identity when both widths match so that identical networks
    give zero loss.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 normalize_input: bool = True, name: str = "proj"):
        self.name = name
        self.normalize_input = normalize_input
        if in_dim == out_dim:
            w = np.eye(in_dim, dtype=DTYPE)
        else:
            w = trunc_normal(rng or np.random.default_rng(0), (in_dim, out_dim))
        self.weight = tt.parameter(w)
        self.bias = tt.parameter(np.zeros(out_dim, dtype=DTYPE))

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        if self.normalize_input:
            x = whiten(x)
        return tt.linear(x, self.weight, self.bias)


def merge_heads(x: Tensor) -> Tensor:
    """[B, M, T, d] -> [B, T, M*d]."""
    b, m, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, m * d)


# ---------------------------------------------------------------------------
# composite losses
# ---------------------------------------------------------------------------

def class_token_loss(c_s: Tensor, c_t: Tensor, temperature: float = 1.0) -> Tensor:
    """KL between temperature-softmaxed class tokens (teacher is the target)."""
    if c_s.shape != c_t.shape:
        raise tt.ShapeError(f"class token dims differ: {c_s.shape} vs {c_t.shape}; project the student first")
    p = tt.softmax(c_s * (1.0 / temperature), axis=-1)
    t = tt.softmax(c_t * (1.0 / temperature), axis=-1)
    return kl_loss(p, t)


def feature_loss(student_feature: Tensor, teacher_feature: Tensor, head: ProjectionHead) -> Tensor:
    return smooth_l1(head(student_feature), whiten(teacher_feature))


def relation_loss(student: RelationSet, teacher: RelationSet, pairs=("QK", "VV"),
                  softmax: bool | None = None) -> Tensor:
    """Sum over ``pairs`` of the per-head-averaged relation divergence.

    With softmaxed relations the per-row KL is used; raw scaled products are
    compared with smooth L1 instead.
    """
    if student.heads != teacher.heads:
        raise ConfigError(
            f"student has {student.heads} heads in its last block but the teacher target block has "
            f"{teacher.heads}; build the student with adaptive_last_block_heads={teacher.heads}")
    if student.tokens != teacher.tokens:
        raise ConfigError(f"token counts differ: student {student.tokens}, teacher {teacher.tokens}")
    use_kl = student.softmax_applied if softmax is None else softmax
    terms = []
    for pair in pairs:
        s, t = student.get(pair), teacher.get(pair)
        terms.append(kl_loss(s, t) if use_kl else smooth_l1(s, t))
    return tt.sum_all(terms)


def reconstruction_loss(predicted: Tensor, images: np.ndarray, mask, patch_size: int,
                        eps: float = 1e-6) -> Tensor:
    """Mean squared error on masked patches against per-patch normalised pixels.

    ``predicted`` is ``[B, N, p*p*C]`` in :func:`patchify` order.
    """
    if mask is None:
        raise ContractError("reconstruction_loss needs a mask")
    masked = mask.masked if isinstance(mask, MaskSpec) else np.asarray(mask, dtype=bool)
    target = patchify(np.asarray(images, dtype=DTYPE), patch_size)
    mu = target.mean(axis=-1, keepdims=True)
    var = target.var(axis=-1, keepdims=True)
    target = ((target - mu) / np.sqrt(var + eps)).astype(DTYPE)
    count = int(masked.sum())
    if count == 0:
        raise ContractError("reconstruction_loss needs at least one masked patch")
    diff = predicted - Tensor(target)
    per_patch = (diff * diff).mean(axis=-1)
    weights = Tensor(masked.astype(DTYPE) / DTYPE(count))
    return (per_patch * weights).sum()


# ---------------------------------------------------------------------------
# bundle used by the training loop
# ---------------------------------------------------------------------------

class DistillHeads:
    """Projection heads and decoder needed by one :class:`LossStrategy`."""

    def __init__(self, strategy: LossStrategy, student_dim: int, teacher_dim: int,
                 patch_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.strategy = strategy
        self.projections: dict[str, ProjectionHead] = {}
        if strategy.kind == "class_token":
            self.projections["cls"] = ProjectionHead(student_dim, teacher_dim, rng, normalize_input=False,
                                                     name="proj.cls")
        elif strategy.kind == "feature":
            streams = ("q", "k", "v") if strategy.feature_target == "qkv" else (strategy.feature_target,)
            for s in streams:
                self.projections[s] = ProjectionHead(student_dim, teacher_dim, rng,
                                                     strategy.student_feature_norm, name=f"proj.{s}")
        self.decoder: ProjectionHead | None = None
        if strategy.with_reconstruction:
            self.decoder = ProjectionHead(student_dim, patch_dim, rng, normalize_input=True, name="decoder")

    def params(self) -> dict[str, Tensor]:
        out = {}
        for head in self.projections.values():
            out.update(head.params())
        if self.decoder is not None:
            out.update(self.decoder.params())
        return out


def _feature_streams(taps: BlockTaps, target: str) -> dict[str, Tensor]:
    if target == "qkv":
        return {"q": merge_heads(taps.q), "k": merge_heads(taps.k), "v": merge_heads(taps.v)}
    if target == "output":
        return {"output": taps.block_feature}
    return {target: getattr(taps, target)}


def distill_loss(strategy: LossStrategy, student_taps: BlockTaps, teacher_taps: BlockTaps,
                 heads: DistillHeads, images=None, mask=None, patch_size: int | None = None):
    """Total loss and a name -> float breakdown for one batch."""
    parts: dict[str, Tensor] = {}
    if strategy.kind == "relation":
        pairs = strategy.relation_pairs
        s_rel = compute_relations(student_taps.q, student_taps.k, student_taps.v,
                                  strategy.relation_softmax, pairs, strategy.exclude_cls)
        with tt.no_grad():
            t_rel = compute_relations(teacher_taps.q, teacher_taps.k, teacher_taps.v,
                                      strategy.relation_softmax, pairs, strategy.exclude_cls)
        for pair in pairs:
            parts[f"rel_{pair.lower()}"] = relation_loss(s_rel, t_rel, (pair,), strategy.relation_softmax)
    elif strategy.kind == "feature":
        s_streams = _feature_streams(student_taps, strategy.feature_target)
        t_streams = _feature_streams(teacher_taps, strategy.feature_target)
        for name, s_feat in s_streams.items():
            parts[f"feat_{name}"] = feature_loss(s_feat, tt.Tensor(t_streams[name].data),
                                                 heads.projections[name])
    else:
        c_s = heads.projections["cls"](student_taps.block_feature[:, 0, :])
        c_t = tt.Tensor(teacher_taps.block_feature.data[:, 0, :])
        parts["cls"] = class_token_loss(c_s, c_t, strategy.class_token_temperature)
    if strategy.with_reconstruction:
        if heads.decoder is None or mask is None:
            raise ContractError("reconstruction needs a decoder head and a masked input")
        pred = heads.decoder(student_taps.block_feature[:, 1:, :])
        parts["recon"] = reconstruction_loss(pred, images, mask, patch_size) * strategy.reconstruction_weight
    total = tt.sum_all(parts.values())
    return total, {k: float(v.data) for k, v in parts.items()}
