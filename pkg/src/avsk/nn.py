"""Parameter trees, initialisers, and the Adam optimiser.

Parameters live in nested dicts of :class:`Tensor` leaves so they can be
flattened to dotted names for checkpoints and counted without ceremony.
"""
from __future__ import annotations

import math

import numpy as np

from avsk.autodiff import Tensor, ops


def param(arr, dtype):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def init_linear(rng, din, dout, dtype=np.float32, bias=True, scale=1.0):
    limit = scale * math.sqrt(6.0 / (din + dout))
    p = {"w": param(rng.uniform(-limit, limit, size=(din, dout)), dtype)}
    if bias:
        p["b"] = param(np.zeros(dout), dtype)
    return p


def init_layer_norm(d, dtype=np.float32):
    return {"g": param(np.ones(d), dtype), "b": param(np.zeros(d), dtype)}


def linear(x, p):
    y = ops.matmul(x, p["w"])
    return ops.add_bias(y, p["b"]) if "b" in p else y


def layer_norm(x, p, eps=1e-6):
    return ops.layer_norm(x, p["g"], p["b"], eps)


def flatten(tree, prefix=""):
    out = {}
    for key in sorted(tree):
        value = tree[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def unflatten(flat):
    tree = {}
    for name, value in flat.items():
        node = tree
        *path, leaf = name.split(".")
        for part in path:
            node = node.setdefault(part, {})
        node[leaf] = value
    return tree


def count(tree):
    return int(sum(t.size for t in flatten(tree).values()))


def map_tree(fn, tree):
    return {k: map_tree(fn, v) if isinstance(v, dict) else fn(v) for k, v in tree.items()}


def cast(tree, dtype):
    return map_tree(lambda t: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad), tree)


def warmup_cosine(step, total_steps, peak_lr, warmup_steps, final_ratio=0.1):
    """Linear warmup to ``peak_lr`` then cosine decay to ``peak_lr * final_ratio``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    floor = peak_lr * final_ratio
    return floor + 0.5 * (peak_lr - floor) * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.98), eps=1e-9, clip_norm=None):
        self.params = list(flatten(params).values())
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self):
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                             for p in self.params if p.grad is not None))

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        factor = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                factor = self.clip_norm / (norm + 1e-12)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * factor
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
