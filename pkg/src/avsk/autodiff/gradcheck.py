"""Central-difference gradient checker."""
from __future__ import annotations

import numpy as np

from avsk.autodiff.tensor import Tensor, backward
from avsk.errors import ContractError


def numeric_grad(f, inputs, h=1e-6):
    grads = []
    for x in inputs:
        g = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = flat[i]
            fp = _scalar(f(*inputs))
            flat[i] = orig - h
            lo = flat[i]
            fm = _scalar(f(*inputs))
            flat[i] = orig
            gflat[i] = (fp - fm) / (hi - lo)  # the step actually taken after rounding
        grads.append(g)
    return grads


def _scalar(y):
    if not isinstance(y, Tensor) or y.size != 1:
        shape = getattr(y, "shape", None)
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {shape}")
    return float(y.data)


def analytic_grad(f, inputs):
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    y = f(*inputs)
    _scalar(y)
    backward(y)
    return [x.grad if x.grad is not None else np.zeros_like(x.data) for x in inputs]


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
        err = np.abs(a - n) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def grad_check(f, x, h=1e-6):
    """Max relative error between backprop and central differences.

    ``x`` is a tensor or a sequence of tensors; ``f`` takes them positionally
    and returns a scalar tensor. Inputs should be float64.
    """
    if not 1e-8 <= h <= 1e-3:
        raise ContractError(f"step h must lie in [1e-8, 1e-3], got {h}")
    inputs = [x] if isinstance(x, Tensor) else list(x)
    analytic = analytic_grad(f, inputs)
    numeric = numeric_grad(f, inputs, h)
    return max_rel_err(analytic, numeric)
