"""Dense float32 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order, accumulates gradients on the leaves that require them and
then releases the graph.  Fused primitives (softmax, layer norm, losses) are
built with :func:`make_op` so other modules can add their own.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
LN_EPS = 1e-6

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf reached a loss."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == DTYPE:
        return x
    return np.asarray(x, dtype=DTYPE)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float32 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, _op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires it.

        The graph is freed afterwards; calling again without a new forward
        raises :class:`ContractError`.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise ContractError("graph already consumed by a previous backward(); run forward again")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"loss is not finite: {self.data.reshape(-1)[0]}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._parents:
                if g is not None:
                    parent_grads = node._backward(g)
                    for p, pg in zip(node._parents, parent_grads):
                        if pg is None or not p.requires_grad:
                            continue
                        key = id(p)
                        if key in grads:
                            grads[key] = grads[key] + pg
                        else:
                            grads[key] = pg
                node._parents = ()
                node._backward = None
                node._consumed = True
            elif g is not None and node.requires_grad:
                g = _as_array(g)
                node.grad = g.copy() if node.grad is None else node.grad + g

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(ensure_tensor(other)))

    def __rsub__(self, other):
        return add(ensure_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` must return one gradient (or None) per parent, in order.
    Graph recording is skipped when no parent requires grad or under
    :func:`no_grad`.
    """
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=name)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return make_op(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        s = DTYPE(b)
        return make_op(a.data * s, (a,), lambda g: (g * s,), "scale")
    a, b = ensure_tensor(a), ensure_tensor(b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return make_op(ad * bd, (a, b),
                   lambda g: (unbroadcast(g * bd, sa) if a.requires_grad else None,
                              unbroadcast(g * ad, sb) if b.requires_grad else None),
                   "mul")


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, float(s))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return make_op(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def power(a: Tensor, exponent: float) -> Tensor:
    e = DTYPE(exponent)
    ad = a.data
    return make_op(ad ** e, (a,), lambda g: (g * e * ad ** (e - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


_GELU_C = DTYPE(math.sqrt(2.0 / math.pi))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1 + DTYPE(0.044715) * x2))
    half_x = DTYPE(0.5) * x
    out = half_x * (1 + t)

    def back(g):
        dinner = _GELU_C * (1 + DTYPE(3 * 0.044715) * x2)
        return (g * (DTYPE(0.5) * (1 + t) + half_x * (1 - t * t) * dinner),)

    return make_op(out, (a,), back, "gelu")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` is true, else ``b`` (cond is constant)."""
    a, b = ensure_tensor(a), ensure_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data).astype(DTYPE, copy=False)
    sa, sb = a.shape, b.shape
    return make_op(out, (a, b),
                   lambda g: (unbroadcast(np.where(cond, g, 0).astype(DTYPE), sa),
                              unbroadcast(np.where(cond, 0, g).astype(DTYPE), sb)),
                   "where")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return make_op(np.asarray(out, dtype=DTYPE), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    return make_op(out, (a,), lambda g: (unbroadcast(g, src),), "broadcast_to")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op(np.ascontiguousarray(a.data[index]), (a,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op(out, tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_op(out, tensors, back, "stack")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with broadcast batch dims."""
    a, b = ensure_tensor(a), ensure_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold batch axes into rows: one GEMM instead of a broadcast loop
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(*lead, bd.shape[-1])

        def back_folded(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return make_op(out, (a, b), back_folded, "matmul")

    out = ad @ bd

    def back(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# normalisation and probability
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis; affine transform only when gamma/beta are given."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def back(g):
        gx = g * gamma.data if gamma is not None else g
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx.astype(DTYPE, copy=False)]
        if gamma is not None:
            grads.append(unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(unbroadcast(g, beta.shape))
        return tuple(grads)

    return make_op(out.astype(DTYPE, copy=False), parents, back, "layer_norm")


def cross_entropy(logits: Tensor, labels: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross entropy of integer ``labels`` under ``logits`` [B, C]."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    target = np.full((b, c), label_smoothing / c, dtype=DTYPE)
    target[np.arange(b), labels] += DTYPE(1.0 - label_smoothing)
    logp = log_softmax(logits, axis=-1)
    return mul(tsum(mul(logp, Tensor(target))), -1.0 / b)


def sum_all(tensors: Iterable[Tensor]) -> Tensor:
    total = None
    for t in tensors:
        total = t if total is None else add(total, t)
    if total is None:
        raise ContractError("sum_all over an empty sequence")
    return total
