from avsk.autodiff.tensor import (
    AllocationTracker,
    Tensor,
    as_tensor,
    backward,
    grad_enabled,
    no_grad,
    track_allocations,
)
from avsk.autodiff.gradcheck import grad_check
from avsk.autodiff import ops

__all__ = [
    "AllocationTracker",
    "Tensor",
    "as_tensor",
    "backward",
    "grad_check",
    "grad_enabled",
    "no_grad",
    "ops",
    "track_allocations",
]
