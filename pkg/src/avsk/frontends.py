"""Visual front-ends: linear projection, 3D-patch ViT, and (2+1)D VGG.

Functional forwards take a frames tensor ``(..., T, H, W, C)`` plus a
parameter tree; the estimator classes wrap them with the fit/transform
protocol. Dropped frames are expected as all-zero pixels.
"""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from avsk import nn
from avsk.autodiff import Tensor, no_grad, ops
from avsk.config import FrontEndConfig, ModelConfig
from avsk.conformer import attention, ffn, init_ffn, init_mhsa
from avsk.data import VideoClip
from avsk.errors import ConfigError, DimensionError

# -- linear projection ---------------------------------------------------------


def init_lp(cfg, rng, dtype=np.float32):
    h, w = cfg.input_hw
    return nn.init_linear(rng, h * w * cfg.channels, cfg.out_dim, dtype, bias=cfg.lp_bias)


def lp_forward(frames, params):
    """out[t] = flatten(frame_t) @ W + b; no mixing across time."""
    *lead, h, w, c = frames.shape
    rows = params["w"].shape[0]
    if h * w * c != rows:
        raise DimensionError(f"lp: frame {h}x{w}x{c}={h * w * c} values vs weight rows {rows}")
    flat = ops.reshape(frames, (*lead, h * w * c))
    return nn.linear(flat, params)


# -- ViT -------------------------------------------------------------------------


def n_time_slabs(t, pt):
    return -(-t // pt)


def vit_patchify(frames, patch):
    """Cut ``(..., T, H, W, C)`` into 3D patches.

    Returns ``(..., S, N, pt*ph*pw*C)`` with S = ceil(T/pt) time slabs and
    N = (H/ph)*(W/pw) row-major spatial tokens per slab. The time axis is
    tail-padded with zero (masked) frames.
    """
    if not isinstance(frames, Tensor):
        frames = Tensor(np.asarray(frames))
    pt, ph, pw = patch
    *lead, t, h, w, c = frames.shape
    if h % ph or w % pw:
        raise ConfigError(f"patch {ph}x{pw} does not divide frame {h}x{w}", "vit_patch")
    s = n_time_slabs(t, pt)
    if s * pt != t:
        pad = Tensor(np.zeros((*lead, s * pt - t, h, w, c), dtype=frames.dtype))
        frames = ops.concat([frames, pad], axis=len(lead))
    nh, nw = h // ph, w // pw
    k = len(lead)
    x = ops.reshape(frames, (*lead, s, pt, nh, ph, nw, pw, c))
    axes = tuple(range(k)) + tuple(k + i for i in (0, 2, 4, 1, 3, 5, 6))
    x = ops.transpose(x, axes)
    return ops.reshape(x, (*lead, s, nh * nw, pt * ph * pw * c))


def vit_tokens_per_slab(cfg):
    _, ph, pw = cfg.vit_patch
    h, w = cfg.input_hw
    return (h // ph) * (w // pw)


def vit_patch_dim(cfg):
    pt, ph, pw = cfg.vit_patch
    return pt * ph * pw * cfg.channels


def init_vit(cfg, rng, dtype=np.float32):
    d = cfg.out_dim
    p = {"proj": nn.init_linear(rng, vit_patch_dim(cfg), d, dtype)}
    if cfg.vit_depth:
        p["pos"] = nn.param(0.02 * rng.standard_normal((vit_tokens_per_slab(cfg), d)), dtype)
        for i in range(cfg.vit_depth):
            p[f"layer{i}"] = {"attn": init_mhsa(rng, d, dtype),
                              "ffn": init_ffn(rng, d, cfg.vit_ffn_expansion, dtype)}
        p["ln_out"] = nn.init_layer_norm(d, dtype)
    return p


def vit_forward(frames, cfg, params):
    """Patchify, project, run pre-norm transformer layers within each time slab,
    then mean-pool the spatial tokens of every slab: output ``(..., ceil(T/pt), D)``."""
    if cfg.kind != "vit":
        raise ConfigError(f"expected a vit config, got {cfg.kind!r}", "frontend.kind")
    tokens = nn.linear(vit_patchify(frames, cfg.vit_patch), params["proj"])
    if cfg.vit_depth:
        tokens = ops.add_bias(tokens, params["pos"])
        for i in range(cfg.vit_depth):
            layer = params[f"layer{i}"]
            out, _ = attention(nn.layer_norm(tokens, layer["attn"]["ln"]), layer["attn"],
                               cfg.vit_heads)
            tokens = ops.add(tokens, out)
            tokens = ops.add(tokens, ffn(tokens, layer["ffn"]))
        tokens = nn.layer_norm(tokens, params["ln_out"])
    return ops.mean(tokens, axis=tokens.ndim - 2)


# -- (2+1)D VGG --------------------------------------------------------------------


def init_vgg21d(cfg, rng, dtype=np.float32):
    k, kt = cfg.vgg_kernel, cfg.vgg_temporal_kernel
    p, cin = {}, cfg.channels
    for i, cout in enumerate(cfg.vgg_channels):
        lim = math.sqrt(6.0 / (k * k * (cin + cout)))
        p[f"block{i}"] = {
            "spatial": {"w": nn.param(rng.uniform(-lim, lim, (k, k, cin, cout)), dtype),
                        "b": nn.param(np.zeros(cout), dtype)},
            "temporal": {"w": nn.param(rng.uniform(-0.5, 0.5, (kt, cout)), dtype),
                         "b": nn.param(np.zeros(cout), dtype)},
        }
        cin = cout
    p["out"] = nn.init_linear(rng, cin, cfg.out_dim, dtype)
    return p


def vgg21d_receptive_radius(cfg):
    return len(cfg.vgg_channels) * (cfg.vgg_temporal_kernel - 1) // 2


def vgg21d_forward(frames, cfg, params):
    """Blocks of spatial conv2d -> swish -> per-channel temporal conv, 2x2 max
    pool between blocks, then spatial average pool and a linear map to D."""
    if cfg.kind != "vgg21d":
        raise ConfigError(f"expected a vgg21d config, got {cfg.kind!r}", "frontend.kind")
    if not cfg.vgg_channels:
        raise ConfigError("channel list must be non-empty", "frontend.vgg_channels")
    *lead, t, h, w, c = frames.shape
    k = len(lead)
    x = ops.reshape(frames, (-1, h, w, c))
    n_blocks = len(cfg.vgg_channels)
    for i in range(n_blocks):
        blk = params[f"block{i}"]
        x = ops.add_bias(ops.conv2d(x, blk["spatial"]["w"], 1, "same"), blk["spatial"]["b"])
        x = ops.swish(x)
        _, hh, ww, cc = x.shape
        x = ops.reshape(x, (*lead, t, hh, ww, cc))
        # time next to channels so the depthwise conv runs along it
        perm = tuple(range(k)) + (k + 1, k + 2, k, k + 3)
        x = ops.transpose(x, perm)
        x = ops.depthwise_conv1d(x, blk["temporal"]["w"], blk["temporal"]["b"])
        x = ops.transpose(x, tuple(np.argsort(perm)))
        x = ops.reshape(x, (-1, hh, ww, cc))
        if i < n_blocks - 1:
            x = ops.max_pool2d(x, 2)
    pooled = ops.mean(x, axis=(1, 2))
    pooled = ops.reshape(pooled, (*lead, t, pooled.shape[-1]))
    return nn.linear(pooled, params["out"])


# -- dispatch / counting -------------------------------------------------------------

_INIT = {"lp": init_lp, "vit": init_vit, "vgg21d": init_vgg21d}


def init_frontend(cfg, rng, dtype=np.float32):
    cfg.validate()
    return _INIT[cfg.kind](cfg, rng, dtype)


def frontend_forward(frames, cfg, params):
    if cfg.kind == "lp":
        return lp_forward(frames, params)
    if cfg.kind == "vit":
        return vit_forward(frames, cfg, params)
    return vgg21d_forward(frames, cfg, params)


def output_length(cfg, t):
    return n_time_slabs(t, cfg.vit_patch[0]) if cfg.kind == "vit" else t


def _count_frontend(cfg):
    d = cfg.out_dim
    if cfg.kind == "lp":
        h, w = cfg.input_hw
        return h * w * cfg.channels * d + (d if cfg.lp_bias else 0)
    if cfg.kind == "vit":
        n = vit_patch_dim(cfg) * d + d
        if cfg.vit_depth:
            e = cfg.vit_ffn_expansion
            layer = (2 * d + 4 * d * d + 3 * d) + (2 * d + d * e * d + e * d + e * d * d + d)
            n += vit_tokens_per_slab(cfg) * d + cfg.vit_depth * layer + 2 * d
        return n
    k, kt = cfg.vgg_kernel, cfg.vgg_temporal_kernel
    n, cin = 0, cfg.channels
    for cout in cfg.vgg_channels:
        n += k * k * cin * cout + cout + kt * cout + cout
        cin = cout
    return n + cin * d + d


def count_params(cfg):
    """Exact scalar parameter count, computed from the config alone."""
    if isinstance(cfg, ModelConfig):
        from avsk.model import count_model_params
        return count_model_params(cfg)
    cfg.validate()
    return _count_frontend(cfg)


# -- estimators -------------------------------------------------------------------


class _FrontEnd(BaseEstimator, TransformerMixin):
    kind = None

    def _config(self):
        raise NotImplementedError

    def fit(self, X=None, y=None):
        cfg = self._config()
        cfg.validate()
        self.config_ = cfg
        self.dtype_ = np.float64 if self.dtype == "f64" else np.float32
        self.params_ = init_frontend(cfg, np.random.default_rng(self.random_state), self.dtype_)
        self.n_params_ = nn.count(self.params_)
        return self

    def forward(self, frames):
        check_is_fitted(self, "params_")
        return frontend_forward(frames, self.config_, self.params_)

    def transform(self, X):
        """Clips (VideoClip or (T, H, W, 3) arrays) -> list of (T', D) embeddings."""
        check_is_fitted(self, "params_")
        out = []
        with no_grad():
            for clip in X:
                frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
                if isinstance(clip, VideoClip):
                    frames = frames * clip.mask[:, None, None, None]
                h, w = self.config_.input_hw
                if frames.ndim != 4 or frames.shape[1:] != (h, w, 3):
                    raise DimensionError(f"expected (T, {h}, {w}, 3) frames, got {frames.shape}")
                out.append(self.forward(Tensor(frames.astype(self.dtype_))).data)
        return out


class LinearProjectionFrontEnd(_FrontEnd):
    """One affine map per frame: the "one-patch" front-end."""

    kind = "lp"

    def __init__(self, input_hw=(16, 16), out_dim=64, bias=True, dtype="f32", random_state=0):
        self.input_hw = input_hw
        self.out_dim = out_dim
        self.bias = bias
        self.dtype = dtype
        self.random_state = random_state

    def _config(self):
        return FrontEndConfig(kind="lp", input_hw=tuple(self.input_hw), out_dim=self.out_dim,
                              lp_bias=self.bias)


class ViTFrontEnd(_FrontEnd):
    kind = "vit"

    def __init__(self, input_hw=(16, 16), out_dim=64, patch=(1, 8, 8), depth=1, heads=2,
                 ffn_expansion=2, dtype="f32", random_state=0):
        self.input_hw = input_hw
        self.out_dim = out_dim
        self.patch = patch
        self.depth = depth
        self.heads = heads
        self.ffn_expansion = ffn_expansion
        self.dtype = dtype
        self.random_state = random_state

    def _config(self):
        return FrontEndConfig(kind="vit", input_hw=tuple(self.input_hw), out_dim=self.out_dim,
                              vit_patch=tuple(self.patch), vit_depth=self.depth,
                              vit_heads=self.heads, vit_ffn_expansion=self.ffn_expansion)


class VGG21DFrontEnd(_FrontEnd):
    kind = "vgg21d"

    def __init__(self, input_hw=(16, 16), out_dim=64, channels=(8, 16), kernel=3,
                 temporal_kernel=3, dtype="f32", random_state=0):
        self.input_hw = input_hw
        self.out_dim = out_dim
        self.channels = channels
        self.kernel = kernel
        self.temporal_kernel = temporal_kernel
        self.dtype = dtype
        self.random_state = random_state

    def _config(self):
        return FrontEndConfig(kind="vgg21d", input_hw=tuple(self.input_hw), out_dim=self.out_dim,
                              vgg_channels=tuple(self.channels), vgg_kernel=self.kernel,
                              vgg_temporal_kernel=self.temporal_kernel)


def make_frontend(cfg: FrontEndConfig, dtype="f32", random_state=0):
    """Estimator instance matching a FrontEndConfig."""
    if cfg.kind == "lp":
        return LinearProjectionFrontEnd(cfg.input_hw, cfg.out_dim, cfg.lp_bias, dtype, random_state)
    if cfg.kind == "vit":
        return ViTFrontEnd(cfg.input_hw, cfg.out_dim, cfg.vit_patch, cfg.vit_depth, cfg.vit_heads,
                           cfg.vit_ffn_expansion, dtype, random_state)
    return VGG21DFrontEnd(cfg.input_hw, cfg.out_dim, cfg.vgg_channels, cfg.vgg_kernel,
                          cfg.vgg_temporal_kernel, dtype, random_state)
