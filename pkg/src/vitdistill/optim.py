"""AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, Tensor


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
               state: AdamWState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.05, decay_mask: dict[str, bool] | None = None,
               lr_scale: dict[str, float] | None = None) -> AdamWState:
    """One in-place AdamW update of ``params``.

    Decay is applied straight to the weights (``w -= lr * wd * w``) before the
    bias-corrected Adam step.  ``decay_mask`` switches decay off per name,
    ``lr_scale`` multiplies the learning rate per name (layer-wise decay).
    Parameters whose gradient is None are left untouched.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(w)
            v = np.zeros_like(w)
        m *= DTYPE(b1)
        m += DTYPE(1.0 - b1) * g
        v *= DTYPE(b2)
        v += DTYPE(1.0 - b2) * (g * g)
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        wd = weight_decay if (decay_mask is None or decay_mask.get(name, True)) else 0.0
        if wd:
            w *= DTYPE(1.0 - step_lr * wd)
        denom = np.sqrt(v / DTYPE(bc2)) + DTYPE(eps)
        w -= DTYPE(step_lr / bc1) * m / denom
    return state


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step` for named tensors."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05, lr_scale: dict[str, float] | None = None,
                 no_decay: set[str] | None = None):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scale = lr_scale
        no_decay = no_decay if no_decay is not None else default_no_decay(params)
        self.decay_mask = {n: n not in no_decay for n in params}
        self.state = AdamWState()

    def step(self, lr: float) -> None:
        adamw_step({n: p.data for n, p in self.params.items()},
                   {n: p.grad for n, p in self.params.items()},
                   self.state, lr, self.betas, self.eps, self.weight_decay,
                   self.decay_mask, self.lr_scale)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def default_no_decay(params: dict[str, Tensor]) -> set[str]:
    # biases, norm gains and learned tokens are not decayed
    return {n for n, p in params.items() if p.ndim < 2 or n.endswith("token") or n.endswith("pos_embed")}


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float, min_lr: float = 1e-5) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to ``min_lr`` at the last step.

    During warmup ``lr(s) = peak * (s + 1) / warmup``; from ``s = warmup`` the
    cosine leg starts at ``peak`` and reaches ``min_lr`` at ``s = total - 1``.
    """
    if step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return min_lr
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + (peak_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def layerwise_lr_scale(param_names, depth: int, decay: float) -> dict[str, float]:
    """Per-parameter lr multipliers: embeddings get ``decay**(depth+1)``, the head gets 1."""
    scales = {}
    for name in param_names:
        if name.startswith("blocks."):
            layer = int(name.split(".")[1]) + 1
        elif name.startswith(("patch_embed", "cls_token", "mask_token", "pos_embed")):
            layer = 0
        else:
            layer = depth + 1
        scales[name] = decay ** (depth + 1 - layer)
    return scales
