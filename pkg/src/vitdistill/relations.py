"""Token-to-token relation matrices computed per attention head.

For per-head projections ``X, Y`` of shape ``[..., M, T, d]`` a relation is
``softmax(X @ Y^T / sqrt(d))`` over the key axis, or the raw scaled product
when softmax is switched off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor

PAIRS = ("QQ", "KK", "VV", "QK")


@dataclass
class RelationSet:
    qq: Tensor
    kk: Tensor
    vv: Tensor
    qk: Tensor
    softmax_applied: bool
    scale: float

    def get(self, pair: str) -> Tensor:
        pair = pair.upper()
        if pair not in PAIRS:
            raise KeyError(f"unknown relation pair {pair!r}; expected one of {PAIRS}")
        r = getattr(self, pair.lower())
        if r is None:
            raise KeyError(f"relation {pair} was not computed")
        return r

    def _any(self) -> Tensor:
        for name in ("qq", "kk", "vv", "qk"):
            r = getattr(self, name)
            if r is not None:
                return r
        raise ValueError("empty RelationSet")

    @property
    def heads(self) -> int:
        return self._any().shape[-3]

    @property
    def tokens(self) -> int:
        return self._any().shape[-1]


def scaled_product(x: Tensor, y: Tensor, scale: float) -> Tensor:
    return tt.matmul(x, y.swapaxes(-1, -2)) * scale


def relation(x: Tensor, y: Tensor, scale: float, apply_softmax: bool = True) -> Tensor:
    r = scaled_product(x, y, scale)
    return tt.softmax(r, axis=-1) if apply_softmax else r


def compute_relations(q: Tensor, k: Tensor, v: Tensor, apply_softmax: bool = True,
                      pairs=PAIRS, exclude_cls: bool = False) -> RelationSet:
    """Q-Q, K-K, V-V and Q-K relations of one block.

    Only the relations named in ``pairs`` are computed; the others are left
    as None.  ``exclude_cls`` drops token 0 before forming relations.
    """
    if not (q.shape == k.shape == v.shape):
        raise tt.ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if exclude_cls:
        q, k, v = q[..., 1:, :], k[..., 1:, :], v[..., 1:, :]
    scale = 1.0 / math.sqrt(q.shape[-1])
    wanted = {p.upper() for p in pairs}
    src = {"Q": q, "K": k, "V": v}
    out = {}
    for pair in PAIRS:
        out[pair.lower()] = (relation(src[pair[0]], src[pair[1]], scale, apply_softmax)
                             if pair in wanted else None)
    return RelationSet(softmax_applied=apply_softmax, scale=scale, **out)


def stack_heads(per_head) -> Tensor:
    """Stack a sequence of ``[..., T, T]`` relations along a new head axis at -3."""
    return tt.stack(list(per_head), axis=-3)


def relations_for_block(taps, pairs=PAIRS, apply_softmax: bool = True,
                        exclude_cls: bool = False) -> RelationSet:
    """Relations from one block's taps (anything with ``.q``, ``.k``, ``.v``)."""
    return compute_relations(taps.q, taps.k, taps.v, apply_softmax, pairs, exclude_cls)


def relation_to_csv(matrix: np.ndarray, path) -> None:
    np.savetxt(path, np.asarray(matrix, dtype=np.float64), delimiter=",", fmt="%.8g")
