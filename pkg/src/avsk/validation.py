"""Input validation shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np

from avsk.data import SynthExample, VideoClip
from avsk.errors import ContractError, DimensionError


def check_examples(X, min_count=1):
    """Materialise ``X`` as a list of SynthExample, rejecting anything else."""
    if X is None:
        raise ContractError("expected a list of SynthExample, got None")
    X = list(X)
    if len(X) < min_count:
        raise ContractError(f"need at least {min_count} example(s), got {len(X)}")
    for i, ex in enumerate(X):
        if not isinstance(ex, SynthExample):
            raise ContractError(f"item {i} is {type(ex).__name__}, expected SynthExample")
    return X


def check_clip(clip, hw=None):
    """A VideoClip (or (T, H, W, 3) array) with finite pixels and, optionally, a given size."""
    if not isinstance(clip, VideoClip):
        clip = VideoClip(np.asarray(clip))
    if not np.all(np.isfinite(clip.frames)):
        raise ContractError("video frames contain non-finite values")
    if hw is not None and clip.frames.shape[1:3] != tuple(hw):
        raise DimensionError(f"expected {hw[0]}x{hw[1]} frames, got "
                             f"{clip.frames.shape[1]}x{clip.frames.shape[2]}")
    return clip


def check_masks(masks, X):
    if masks is None:
        return [np.ones(ex.video.n_frames, dtype=bool) for ex in X]
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if len(masks) != len(X):
        raise ContractError(f"{len(masks)} masks for {len(X)} examples")
    for i, (m, ex) in enumerate(zip(masks, X)):
        if m.shape != (ex.video.n_frames,):
            raise DimensionError(f"mask {i} has shape {m.shape}, clip has {ex.video.n_frames} frames")
    return masks


def check_int_list(values, name, minimum=None):
    out = [int(v) for v in values]
    if minimum is not None and any(v < minimum for v in out):
        raise ContractError(f"{name}: every value must be >= {minimum}")
    return out
