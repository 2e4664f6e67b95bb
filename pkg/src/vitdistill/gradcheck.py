"""Central finite-difference gradient checks.

The numerical side perturbs the raw float32 inputs and re-runs the forward
pass with graph recording off, so it never touches the backward closures it
is checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_input: list[float]
    ok: bool


def numerical_grad(fn, arrays: list[np.ndarray], which: int, eps: float = 1e-3) -> np.ndarray:
    base = [np.array(a, dtype=np.float32) for a in arrays]
    x = base[which]
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with tt.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + np.float32(eps)
            up = float(fn(*[Tensor(a) for a in base]).data)
            flat[i] = orig - np.float32(eps)
            down = float(fn(*[Tensor(a) for a in base]).data)
            flat[i] = orig
            # divide by the step actually taken after float32 rounding
            step = float(np.float32(orig + np.float32(eps))) - float(np.float32(orig - np.float32(eps)))
            gflat[i] = (up - down) / step
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; tiny norms fall back to absolute."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    diff = np.linalg.norm(a - n)
    if scale < floor:
        return diff
    return diff / scale


def gradcheck(fn, arrays, eps: float = 1e-3, rtol: float = 1e-2, check=None) -> GradCheckResult:
    """Compare autograd gradients of scalar ``fn(*tensors)`` with central differences.

    ``check`` selects which inputs to test (default: all).
    """
    arrays = [np.array(a, dtype=np.float32) for a in arrays]
    check = range(len(arrays)) if check is None else check
    tensors = [Tensor(a.copy(), requires_grad=(i in check)) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    out.backward()
    errs = []
    for i in check:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        errs.append(relative_error(analytic, numerical_grad(fn, arrays, i, eps)))
    worst = max(errs) if errs else 0.0
    return GradCheckResult(worst, errs, worst <= rtol)


def model_gradcheck(loss_fn, params: dict[str, Tensor], eps: float = 1e-3, rtol: float = 1e-2,
                    names=None) -> GradCheckResult:
    """Gradient check over named model parameters; ``loss_fn()`` rebuilds the loss.

    Pass/fail uses the norm-wise error over the concatenated gradient of all
    checked parameters.  Per-parameter errors are reported too, but some
    parameters have gradients that vanish by symmetry (a key bias under a
    softmax), and there float32 differences only measure rounding noise.
    """
    names = list(params) if names is None else list(names)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    errs, all_a, all_n = [], [], []
    for name in names:
        p = params[name]
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size)
        with tt.no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + np.float32(eps)
                up = float(loss_fn().data)
                flat[i] = orig - np.float32(eps)
                down = float(loss_fn().data)
                flat[i] = orig
                step = float(np.float32(orig + np.float32(eps))) - float(np.float32(orig - np.float32(eps)))
                numeric[i] = (up - down) / step
        errs.append(relative_error(analytic, numeric))
        all_a.append(np.asarray(analytic, dtype=np.float64).reshape(-1))
        all_n.append(numeric)
    if not names:
        return GradCheckResult(0.0, [], True)
    worst = relative_error(np.concatenate(all_a), np.concatenate(all_n))
    return GradCheckResult(worst, errs, worst <= rtol)
