"""Dense tensor with reverse-mode gradient tracking.

The graph is recorded implicitly: every op output keeps references to its
parents and a closure mapping the upstream gradient to per-parent gradients.
:func:`backward` walks that graph once in reverse topological order and then
releases it.
"""
from __future__ import annotations

import contextvars
import weakref
from contextlib import contextmanager

import numpy as np

from avsk.errors import CapacityError, ContractError, GraphError

_DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_enabled = contextvars.ContextVar("avsk_grad_enabled", default=True)
_tracker = contextvars.ContextVar("avsk_alloc_tracker", default=None)


class AllocationTracker:
    """Counting allocator for tensor buffers.

    Tracks live and peak bytes of every tensor created while active. With a
    ``cap_bytes`` set, an allocation that would push live bytes over the cap
    raises :class:`CapacityError` instead of succeeding.
    """

    def __init__(self, cap_bytes=None):
        self.cap_bytes = cap_bytes
        self.live_bytes = 0
        self.peak_bytes = 0
        self.n_allocs = 0

    def alloc(self, nbytes):
        if self.cap_bytes is not None and self.live_bytes + nbytes > self.cap_bytes:
            raise CapacityError(
                f"allocation of {nbytes} bytes exceeds cap {self.cap_bytes} "
                f"(live {self.live_bytes})"
            )
        self.live_bytes += nbytes
        self.n_allocs += 1
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def free(self, nbytes):
        self.live_bytes -= nbytes


@contextmanager
def track_allocations(cap_bytes=None):
    tracker = AllocationTracker(cap_bytes)
    token = _tracker.set(tracker)
    try:
        yield tracker
    finally:
        _tracker.reset(token)


@contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled():
    return _grad_enabled.get()


def resolve_dtype(dtype):
    if dtype is None:
        return None
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
        return np.dtype(_DTYPES[dtype])
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    return dtype


class Tensor:
    """N-dimensional float array with an optional gradient.

    Leaf tensors built through the constructor are validated (finite,
    float32/float64). Op outputs skip validation; use :meth:`check_finite`
    where a NaN would otherwise propagate silently.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_op", "_released", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        dtype = resolve_dtype(dtype)
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.dtype(np.float64)
        arr = np.array(arr, dtype=dtype, copy=True)
        if arr.ndim == 0:
            pass
        elif 0 in arr.shape:
            raise ContractError(f"tensor extents must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor data contains NaN or Inf")
        self._init(arr, requires_grad)
        self.name = name

    def _init(self, arr, requires_grad):
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = None
        self._released = False
        self.name = None
        tracker = _tracker.get()
        if tracker is not None:
            tracker.alloc(arr.nbytes)
            weakref.finalize(self, tracker.free, arr.nbytes)

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        out = cls.__new__(cls)
        out._init(arr, requires_grad)
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor._wrap(self.data, False)

    def check_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise ContractError(f"non-finite values in tensor produced by {self._op or 'leaf'}")
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar (strict shapes, see ops) ---------------------------
    def __add__(self, other):
        from avsk.autodiff import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from avsk.autodiff import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from avsk.autodiff import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from avsk.autodiff import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from avsk.autodiff import ops
        return ops.matmul(self, other)

    def backward(self):
        return backward(self)


def make_result(data, parents, backward_fn, op):
    """Wrap an op output, recording the graph edge when gradients flow."""
    requires = _grad_enabled.get() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    The recorded graph is released afterwards; calling again on the same loss
    raises :class:`GraphError`.
    """
    if loss._released:
        raise GraphError("graph already consumed by a previous backward(); re-run forward")
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor with requires_grad=True")
    if not np.all(np.isfinite(loss.data)):
        raise ContractError("loss is not finite")

    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            leaves.append((node, g))
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf, g in leaves:
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = None
            node._released = True
    loss._released = True
    return {id(leaf): leaf.grad for leaf, _ in leaves}
