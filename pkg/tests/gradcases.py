"""Finite-difference cases shared by the unit tests and the acceptance gate.

Every case is ``(name, fn, arrays)`` where ``fn`` maps tensors to a scalar.
Tensor-valued ops are reduced with fixed random weights so every output
element contributes a distinct amount to the gradient.
"""

from __future__ import annotations

import numpy as np

from vitdistill import tensor as tt
from vitdistill.losses import (DistillHeads, LossStrategy, ProjectionHead, class_token_loss, distill_loss,
                               feature_loss, kl_loss, reconstruction_loss, relation_loss, smooth_l1)
from vitdistill.relations import compute_relations
from vitdistill.tensor import Tensor
from vitdistill.vit import MaskSpec, ViTConfig, ViTModel

EPS = 1e-3
RTOL = 1e-2


def _rng(i):
    return np.random.default_rng(1000 + i)


def weighted(shape, seed):
    w = Tensor(_rng(seed).standard_normal(shape).astype(np.float32))
    return lambda y: (y * w).sum()


def op_cases():
    r = _rng(0)
    n = lambda *s: r.standard_normal(s).astype(np.float32)
    pos = lambda *s: (r.uniform(0.5, 2.0, s)).astype(np.float32)
    cond = r.random((3, 4)) > 0.5
    fancy = np.array([0, 2, 2, 1])
    w34, w4, w43 = weighted((3, 4), 1), weighted((4,), 2), weighted((4, 3), 3)
    w234 = weighted((2, 3, 4), 4)
    labels = np.array([0, 2, 1])

    return [
        ("add_broadcast", lambda a, b: w34(a + b), [n(3, 4), n(4)]),
        ("sub", lambda a, b: w34(a - b), [n(3, 4), n(3, 4)]),
        ("neg", lambda a: w34(-a), [n(3, 4)]),
        ("mul_broadcast", lambda a, b: w34(a * b), [n(3, 4), n(3, 1)]),
        ("mul_scalar", lambda a: w34(a * 2.5), [n(3, 4)]),
        ("div", lambda a, b: w34(a / b), [n(3, 4), pos(3, 4)]),
        ("power", lambda a: w34(a ** 1.5), [pos(3, 4)]),
        ("reciprocal", lambda a: w34(tt.reciprocal(a)), [pos(3, 4)]),
        ("exp", lambda a: w34(a.exp()), [n(3, 4)]),
        ("log", lambda a: w34(a.log()), [pos(3, 4)]),
        ("gelu", lambda a: w34(tt.gelu(a)), [n(3, 4) * 2]),
        ("where", lambda a, b: w34(tt.where(cond, a, b)), [n(3, 4), n(4)]),
        ("sum_axis", lambda a: w4(a.sum(axis=0)), [n(3, 4)]),
        ("mean_keepdims", lambda a: w34(a.mean(axis=1, keepdims=True) * a), [n(3, 4)]),
        ("reshape", lambda a: w43(a.reshape(4, 3)), [n(3, 4)]),
        ("transpose", lambda a: w43(a.transpose(1, 0)), [n(3, 4)]),
        ("swapaxes", lambda a: w234(a.swapaxes(0, 2)), [n(4, 3, 2)]),
        ("broadcast_to", lambda a: w234(tt.broadcast_to(a, (2, 3, 4))), [n(1, 3, 1)]),
        ("getitem_slice", lambda a: w34(a[1:4, ::2]), [n(5, 8)]),
        ("getitem_fancy", lambda a: weighted((4, 3), 5)(a[fancy]), [n(3, 3)]),
        ("concat", lambda a, b: weighted((3, 5), 6)(tt.concat([a, b], axis=1)), [n(3, 2), n(3, 3)]),
        ("stack", lambda a, b: w234(tt.stack([a, b], axis=0)), [n(3, 4), n(3, 4)]),
        ("matmul_2d", lambda a, b: weighted((3, 5), 7)(a @ b), [n(3, 4), n(4, 5)]),
        ("matmul_batched", lambda a, b: weighted((2, 2, 3, 3), 8)(tt.matmul(a, b)),
         [n(2, 2, 3, 4), n(2, 2, 4, 3)]),
        ("matmul_broadcast", lambda a, b: weighted((2, 3, 5), 9)(a @ b), [n(2, 3, 4), n(4, 5)]),
        ("linear", lambda x, w, b: weighted((2, 3, 5), 10)(tt.linear(x, w, b)),
         [n(2, 3, 4), n(4, 5), n(5)]),
        ("softmax", lambda a: w34(tt.softmax(a, axis=-1)), [n(3, 4)]),
        ("softmax_axis0", lambda a: w34(tt.softmax(a, axis=0)), [n(3, 4)]),
        ("log_softmax", lambda a: w34(tt.log_softmax(a, axis=-1)), [n(3, 4)]),
        ("layer_norm_affine", lambda x, g, b: w234(tt.layer_norm(x, g, b)), [n(2, 3, 4), n(4), n(4)]),
        ("layer_norm_plain", lambda x: w234(tt.layer_norm(x)), [n(2, 3, 4)]),
        ("cross_entropy", lambda a: tt.cross_entropy(a, labels, 0.1), [n(3, 4)]),
        ("sum_all", lambda a, b: tt.sum_all([a.sum(), (b * b).sum()]), [n(3), n(2, 2)]),
    ]


def _qkv_student(q, k, v, softmax=True, pairs=("QK", "VV")):
    return compute_relations(q, k, v, softmax, pairs)


def loss_cases():
    r = _rng(50)
    n = lambda *s: r.standard_normal(s).astype(np.float32)
    t_probs = r.dirichlet(np.ones(4), size=3).astype(np.float32)
    t_probs /= t_probs.sum(axis=-1, keepdims=True)
    tq, tk, tv = n(1, 2, 3, 2), n(1, 2, 3, 2), n(1, 2, 3, 2)
    with tt.no_grad():
        t_rel = compute_relations(Tensor(tq), Tensor(tk), Tensor(tv))
        t_raw = compute_relations(Tensor(tq), Tensor(tk), Tensor(tv), apply_softmax=False)
    teacher_feat = n(2, 3, 5)
    images = n(1, 3, 4, 4)
    mask = np.array([[True, False, True, True]])

    def feat(x, w, b):
        head = ProjectionHead(4, 5, normalize_input=True)
        head.weight, head.bias = w, b
        return feature_loss(x, Tensor(teacher_feat), head)

    return [
        ("kl_student_side", lambda a: kl_loss(tt.softmax(a, -1), Tensor(t_probs)), [n(3, 4)]),
        ("kl_both_sides", lambda a, b: kl_loss(tt.softmax(a, -1), tt.softmax(b, -1)), [n(3, 4), n(3, 4)]),
        ("smooth_l1", lambda a, b: smooth_l1(a, b), [n(3, 4) * 3, n(3, 4)]),
        ("class_token", lambda a, b: class_token_loss(a, b, 2.0), [n(2, 5), n(2, 5)]),
        ("feature", feat, [n(2, 3, 4), n(4, 5) * 0.5, n(5) * 0.1]),
        ("relation_kl", lambda q, k, v: relation_loss(_qkv_student(q, k, v), t_rel, ("QK", "VV")),
         [n(1, 2, 3, 2), n(1, 2, 3, 2), n(1, 2, 3, 2)]),
        ("relation_all_pairs", lambda q, k, v: relation_loss(
            _qkv_student(q, k, v, pairs=("QQ", "KK", "VV", "QK")), t_rel, ("QQ", "KK", "VV", "QK")),
         [n(1, 2, 3, 2), n(1, 2, 3, 2), n(1, 2, 3, 2)]),
        ("relation_raw", lambda q, k, v: relation_loss(_qkv_student(q, k, v, softmax=False), t_raw,
                                                      ("QK", "VV"), softmax=False),
         [n(1, 2, 3, 2), n(1, 2, 3, 2), n(1, 2, 3, 2)]),
        ("reconstruction", lambda p: reconstruction_loss(p, images, mask, 2), [n(1, 4, 12)]),
    ]


TINY_STUDENT = ViTConfig(depth=1, hidden_dim=8, heads=2, patch_size=2, image_size=4, num_classes=2,
                         mlp_ratio=1.0)
TINY_TEACHER = ViTConfig(depth=2, hidden_dim=8, heads=2, patch_size=2, image_size=4, num_classes=2,
                         mlp_ratio=1.0)

COMPOSITES = {
    "relation": LossStrategy(kind="relation"),
    "feature_qkv": LossStrategy(kind="feature", feature_target="qkv"),
    "feature_ffn_pre": LossStrategy(kind="feature", feature_target="ffn_pre"),
    "feature_output": LossStrategy(kind="feature", feature_target="output"),
    "class_token": LossStrategy(kind="class_token", class_token_temperature=2.0),
    "relation_recon": LossStrategy(kind="relation", with_reconstruction=True),
}


def composite_case(kind: str):
    """``(loss_fn, params)`` for a full distillation loss through a tiny ViT student."""
    strategy = COMPOSITES[kind]
    rng = np.random.default_rng(7)
    images = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    student = ViTModel(TINY_STUDENT, seed=1)
    # push weights away from the near-uniform attention of a fresh init
    for name, p in student.params.items():
        if p.ndim >= 2:
            p.data = (p.data * 20).astype(np.float32)
    teacher = ViTModel(TINY_TEACHER, seed=2)
    for p in teacher.params.values():
        if p.ndim >= 2:
            p.data = (p.data * 20).astype(np.float32)
    mask = MaskSpec.random(2, TINY_STUDENT.num_patches, 0.5, seed=3) if strategy.with_reconstruction else None
    with tt.no_grad():
        _, t_taps = teacher.forward_with_taps(images)
    t_block = t_taps.block(2)
    heads = DistillHeads(strategy, 8, 8, TINY_STUDENT.patch_dim, seed=4)
    for p in heads.params().values():
        p.data = (p.data + rng.standard_normal(p.shape).astype(np.float32) * 0.1).astype(np.float32)
    params = {f"student.{n}": p for n, p in student.params.items()}
    params.update(heads.params())
    for p in params.values():
        p.requires_grad = True

    def loss_fn():
        _, s_taps = student.forward_with_taps(images, mask)
        total, _ = distill_loss(strategy, s_taps.blocks[-1], t_block, heads, images, mask, 2)
        return total

    return loss_fn, params
