"""Plain pre-LN Vision Transformer with an instrumented forward pass.

The forward pass records every intermediate feature a distillation loss can
target: the patch embedding, and per block the attention output before and
after its residual add, the FFN output before and after its residual add, the
per-head queries, keys and values, and the block output.

Shapes carry a leading batch axis: tokens are ``[B, T, D]`` with ``T = N + 1``
(class token at index 0) and per-head projections are ``[B, M, T, D/M]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tt
from .serialize import CheckpointError, load_tensors, save_tensors
from .tensor import DTYPE, NonFiniteError, Tensor


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass(frozen=True)
class ViTConfig:
    depth: int
    hidden_dim: int
    heads: int
    patch_size: int
    image_size: int
    num_classes: int
    in_chans: int = 3
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.0
    adaptive_last_block_heads: int | None = None

    def __post_init__(self):
        for name in ("depth", "hidden_dim", "heads", "patch_size", "image_size", "num_classes", "in_chans"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        m_t = self.adaptive_last_block_heads
        if m_t is not None and (m_t < 1 or self.hidden_dim % m_t):
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by adaptive_last_block_heads {m_t}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.in_chans * self.patch_size ** 2

    @property
    def mlp_dim(self) -> int:
        return int(round(self.hidden_dim * self.mlp_ratio))

    def heads_at(self, block: int) -> int:
        """Head count of 1-based ``block``."""
        if not 1 <= block <= self.depth:
            raise ConfigError(f"block {block} outside [1, {self.depth}]")
        if block == self.depth and self.adaptive_last_block_heads is not None:
            return self.adaptive_last_block_heads
        return self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown ViTConfig fields: {sorted(extra)}")
        return cls(**d)


@dataclass
class MaskSpec:
    """Per-sample random patch mask; ``masked[b, n]`` is True for hidden patches."""

    mask_ratio: float
    seed: int
    masked: np.ndarray

    @classmethod
    def random(cls, batch: int, num_patches: int, mask_ratio: float, seed: int) -> "MaskSpec":
        if not 0.0 <= mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {mask_ratio}")
        rng = np.random.default_rng(seed)
        count = int(math.floor(mask_ratio * num_patches + 0.5))
        masked = np.zeros((batch, num_patches), dtype=bool)
        for b in range(batch):
            masked[b, rng.permutation(num_patches)[:count]] = True
        return cls(mask_ratio, seed, masked)

    def masked_indices(self, sample: int = 0) -> set[int]:
        return set(np.flatnonzero(self.masked[sample]).tolist())


@dataclass
class BlockTaps:
    """Features of one block; names follow the residual structure of the block."""

    block_input: Tensor
    attn_pre: Tensor      # attention branch output
    attn_post: Tensor     # attention output plus the block input
    ffn_pre: Tensor       # FFN branch output
    ffn_post: Tensor      # attn_post + ffn_pre
    q: Tensor
    k: Tensor
    v: Tensor

    @property
    def block_feature(self) -> Tensor:
        return self.ffn_post

    @property
    def heads(self) -> int:
        return self.q.shape[1]


@dataclass
class TapRecord:
    patch_embed: Tensor
    blocks: list[BlockTaps] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.blocks)

    def block(self, index: int) -> BlockTaps:
        """1-based access, matching the usual block numbering."""
        return self.blocks[index - 1]

    @property
    def class_token(self) -> Tensor:
        return self.blocks[-1].block_feature[:, 0, :]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(DTYPE)


def block_param_shapes(prefix: str, dim: int, mlp_dim: int) -> dict[str, tuple]:
    return {
        f"{prefix}.norm1.weight": (dim,), f"{prefix}.norm1.bias": (dim,),
        f"{prefix}.attn.q.weight": (dim, dim), f"{prefix}.attn.q.bias": (dim,),
        f"{prefix}.attn.k.weight": (dim, dim), f"{prefix}.attn.k.bias": (dim,),
        f"{prefix}.attn.v.weight": (dim, dim), f"{prefix}.attn.v.bias": (dim,),
        f"{prefix}.attn.proj.weight": (dim, dim), f"{prefix}.attn.proj.bias": (dim,),
        f"{prefix}.norm2.weight": (dim,), f"{prefix}.norm2.bias": (dim,),
        f"{prefix}.mlp.fc1.weight": (dim, mlp_dim), f"{prefix}.mlp.fc1.bias": (mlp_dim,),
        f"{prefix}.mlp.fc2.weight": (mlp_dim, dim), f"{prefix}.mlp.fc2.bias": (dim,),
    }


def init_param(rng: np.random.Generator, name: str, shape) -> np.ndarray:
    if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
        return np.ones(shape, dtype=DTYPE)
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=DTYPE)
    return trunc_normal(rng, shape)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, N, p*p*C], patches in row-major grid order."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(x.reshape(b, gh * gw, patch * patch * c), dtype=DTYPE)


class ViTModel:
    """Parameter store plus forward pass for a plain ViT.

    Parameters live in ``self.params`` keyed by dotted names; the ordering is
    fixed so checkpoints are byte-stable.
    """

    def __init__(self, config: ViTConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        shapes: dict[str, tuple] = {
            "patch_embed.weight": (c.patch_dim, c.hidden_dim),
            "patch_embed.bias": (c.hidden_dim,),
            "cls_token": (1, 1, c.hidden_dim),
            "mask_token": (1, 1, c.hidden_dim),
            "pos_embed": (1, c.num_tokens, c.hidden_dim),
        }
        for i in range(c.depth):
            shapes.update(block_param_shapes(f"blocks.{i}", c.hidden_dim, c.mlp_dim))
        shapes.update({
            "norm.weight": (c.hidden_dim,), "norm.bias": (c.hidden_dim,),
            "head.weight": (c.hidden_dim, c.num_classes), "head.bias": (c.num_classes,),
        })
        self.params: dict[str, Tensor] = {
            name: tt.parameter(init_param(rng, name, shape)) for name, shape in shapes.items()
        }

    # -- parameter utilities ----------------------------------------------
    def p(self, name: str) -> Tensor:
        return self.params[name]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            unexpected = sorted(set(state) - set(self.params))
            raise CheckpointError(f"parameter names differ: missing={missing} unexpected={unexpected}")
        for name, arr in state.items():
            if name not in self.params:
                continue
            if tuple(arr.shape) != self.params[name].shape:
                raise CheckpointError(
                    f"shape of {name!r} is {tuple(arr.shape)}, model expects {self.params[name].shape}")
            self.params[name].data = np.array(arr, dtype=DTYPE)

    def copy(self) -> "ViTModel":
        other = ViTModel.__new__(ViTModel)
        other.config = self.config
        other.params = {n: tt.parameter(t.data.copy()) for n, t in self.params.items()}
        return other

    def with_config(self, config: ViTConfig) -> "ViTModel":
        """View sharing this model's parameters under a compatible config (e.g. new drop path)."""
        other = ViTModel.__new__(ViTModel)
        other.config = config
        other.params = self.params
        return other

    def param_count(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self.params.items() if n.startswith(prefix))

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- forward pieces -----------------------------------------------------
    def patch_embed(self, images, mask: MaskSpec | np.ndarray | None = None) -> Tensor:
        """Project patches, substitute the mask token, prepend the class token, add positions."""
        c = self.config
        images = np.asarray(images, dtype=DTYPE)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (c.in_chans, c.image_size, c.image_size):
            raise ConfigError(
                f"image shape {images.shape[1:]} does not match config "
                f"({c.in_chans}, {c.image_size}, {c.image_size})")
        b = images.shape[0]
        x = tt.linear(Tensor(patchify(images, c.patch_size)), self.p("patch_embed.weight"),
                      self.p("patch_embed.bias"))
        masked = mask.masked if isinstance(mask, MaskSpec) else mask
        if masked is not None and np.any(masked):
            x = tt.where(np.asarray(masked)[:, :, None], self.p("mask_token"), x)
        cls = tt.broadcast_to(self.p("cls_token"), (b, 1, c.hidden_dim))
        x = tt.concat([cls, x], axis=1)
        return x + self.p("pos_embed")

    def qkv_project(self, x: Tensor, block: int, normalize: bool = True):
        """Per-head Q, K, V of 1-based ``block``, each ``[B, M, T, D/M]``."""
        pre = f"blocks.{block - 1}"
        h = x
        if normalize:
            h = tt.layer_norm(x, self.p(f"{pre}.norm1.weight"), self.p(f"{pre}.norm1.bias"))
        m = self.config.heads_at(block)
        b, t, d = x.shape
        out = []
        for which in ("q", "k", "v"):
            y = tt.linear(h, self.p(f"{pre}.attn.{which}.weight"), self.p(f"{pre}.attn.{which}.bias"))
            out.append(y.reshape(b, t, m, d // m).transpose(0, 2, 1, 3))
        return tuple(out)

    def drop_path_rate_at(self, block: int) -> float:
        c = self.config
        if c.depth == 1:
            return c.drop_path_rate
        return c.drop_path_rate * (block - 1) / (c.depth - 1)

    def _keep_mask(self, rng, batch: int, rate: float) -> np.ndarray | None:
        if rate <= 0.0 or rng is None:
            return None
        keep = (rng.random(batch) >= rate).astype(DTYPE) / DTYPE(1.0 - rate)
        return keep.reshape(batch, 1, 1)

    def block_forward(self, x: Tensor, block: int, train: bool = False,
                      rng: np.random.Generator | None = None,
                      keep: tuple[np.ndarray | None, np.ndarray | None] | None = None):
        """Run 1-based ``block``; returns ``(F_i, BlockTaps)``.

        In training mode each residual branch is kept per sample with
        probability ``1 - rate`` (and rescaled) where the rate grows linearly
        with depth.  ``keep`` overrides the random per-sample multipliers.
        """
        pre = f"blocks.{block - 1}"
        b, t, d = x.shape
        if keep is None:
            if train:
                rate = self.drop_path_rate_at(block)
                keep = (self._keep_mask(rng, b, rate), self._keep_mask(rng, b, rate))
            else:
                keep = (None, None)

        q, k, v = self.qkv_project(x, block)
        scale = 1.0 / math.sqrt(q.shape[-1])
        attn = tt.softmax(tt.matmul(q, k.swapaxes(-1, -2)) * scale, axis=-1)
        ctx = tt.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        h = tt.linear(ctx, self.p(f"{pre}.attn.proj.weight"), self.p(f"{pre}.attn.proj.bias"))
        if keep[0] is not None:
            h = h * Tensor(np.asarray(keep[0], dtype=DTYPE).reshape(b, 1, 1))
        h_hat = h + x

        z = tt.layer_norm(h_hat, self.p(f"{pre}.norm2.weight"), self.p(f"{pre}.norm2.bias"))
        z = tt.gelu(tt.linear(z, self.p(f"{pre}.mlp.fc1.weight"), self.p(f"{pre}.mlp.fc1.bias")))
        f_tilde = tt.linear(z, self.p(f"{pre}.mlp.fc2.weight"), self.p(f"{pre}.mlp.fc2.bias"))
        if keep[1] is not None:
            f_tilde = f_tilde * Tensor(np.asarray(keep[1], dtype=DTYPE).reshape(b, 1, 1))
        out = h_hat + f_tilde
        return out, BlockTaps(x, h, h_hat, f_tilde, out, q, k, v)

    def pool(self, tokens: Tensor) -> Tensor:
        """Final layer norm of the class token."""
        return tt.layer_norm(tokens[:, 0, :], self.p("norm.weight"), self.p("norm.bias"))

    def classification_head(self, pooled: Tensor) -> Tensor:
        return tt.linear(pooled, self.p("head.weight"), self.p("head.bias"))

    def forward_with_taps(self, images, mask: MaskSpec | np.ndarray | None = None,
                          train: bool = False, rng: np.random.Generator | None = None,
                          upto: int | None = None):
        """Full forward pass; returns ``(logits, taps)``.

        ``upto`` stops after that 1-based block, in which case logits are None.
        A non-finite activation raises :class:`NonFiniteError` naming the block.
        """
        depth = self.config.depth if upto is None else upto
        if not 1 <= depth <= self.config.depth:
            raise ConfigError(f"upto={upto} outside [1, {self.config.depth}]")
        x = self.patch_embed(images, mask)
        taps = TapRecord(patch_embed=x)
        for i in range(1, depth + 1):
            x, bt = self.block_forward(x, i, train=train, rng=rng)
            if not np.isfinite(x.data).all():
                raise NonFiniteError(f"non-finite activation in block {i}")
            taps.blocks.append(bt)
        logits = None
        if depth == self.config.depth:
            logits = self.classification_head(self.pool(x))
        return logits, taps

    def __call__(self, images, train: bool = False, rng=None) -> Tensor:
        return self.forward_with_taps(images, train=train, rng=rng)[0]

    def features(self, images) -> np.ndarray:
        """Pooled class-token features in eval mode, without a graph."""
        with tt.no_grad():
            x = self.patch_embed(images)
            for i in range(1, self.config.depth + 1):
                x, _ = self.block_forward(x, i)
            return self.pool(x).data

    # -- persistence -----------------------------------------------------------
    def save(self, directory) -> Path:
        return save_tensors(directory, self.state_dict(),
                            header={"kind": "vit", "config": self.config.to_dict()})

    @classmethod
    def load(cls, directory, expect: ViTConfig | None = None) -> "ViTModel":
        state, header = load_tensors(directory)
        if header.get("kind") != "vit" or "config" not in header:
            raise CheckpointError(f"{directory} is not a ViT checkpoint")
        config = ViTConfig.from_dict(header["config"])
        if expect is not None and expect != config:
            raise CheckpointError(f"checkpoint config {config} differs from expected {expect}")
        model = cls.__new__(cls)
        model.config = config
        template = ViTModel(config, seed=0)
        model.params = template.params
        model.load_state_dict(state, strict=True)
        return model


def build_student(config: ViTConfig, seed: int = 0) -> ViTModel:
    """Student ViT whose last block may use a different head count."""
    return ViTModel(config, seed=seed)


def with_adaptive_heads(config: ViTConfig, teacher_heads: int) -> ViTConfig:
    """Copy of ``config`` whose last block carries ``teacher_heads`` heads."""
    heads = None if teacher_heads == config.heads else teacher_heads
    return replace(config, adaptive_last_block_heads=heads)
