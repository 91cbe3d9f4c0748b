"""Conformer encoder: half-step FFN, self-attention, conv module, half-step FFN, LayerNorm.

All functions accept ``(..., T, D)`` inputs so a batch dimension can ride
along. There are no cross-time statistics anywhere in the block (the conv
module uses LayerNorm, not BatchNorm), so padded or masked frames only
interact with real frames through attention and the depthwise convolution.
"""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from avsk import nn
from avsk.autodiff import Tensor, no_grad, ops
from avsk.config import ConformerConfig
from avsk.errors import ConfigError


def init_ffn(rng, d, expansion, dtype):
    return {"ln": nn.init_layer_norm(d, dtype),
            "w1": nn.init_linear(rng, d, expansion * d, dtype),
            "w2": nn.init_linear(rng, expansion * d, d, dtype)}


def init_mhsa(rng, d, dtype):
    p = {"ln": nn.init_layer_norm(d, dtype)}
    for name in ("q", "k", "v", "o"):
        # a key bias only shifts each score row by a constant, which softmax ignores
        p[name] = nn.init_linear(rng, d, d, dtype, bias=name != "k")
    return p


def init_conv_module(rng, d, kernel, dtype):
    if kernel % 2 == 0:
        raise ConfigError(f"conv kernel must be odd, got {kernel}", "conv_kernel")
    lim = math.sqrt(3.0 / kernel)
    return {"ln": nn.init_layer_norm(d, dtype),
            "pw1": nn.init_linear(rng, d, 2 * d, dtype),
            "dw": {"w": nn.param(rng.uniform(-lim, lim, size=(kernel, d)), dtype),
                   "b": nn.param(np.zeros(d), dtype)},
            "ln2": nn.init_layer_norm(d, dtype),
            "pw2": nn.init_linear(rng, d, d, dtype)}


def init_block(rng, d, expansion=4, kernel=15, dtype=np.float32):
    return {"ffn1": init_ffn(rng, d, expansion, dtype),
            "mhsa": init_mhsa(rng, d, dtype),
            "conv": init_conv_module(rng, d, kernel, dtype),
            "ffn2": init_ffn(rng, d, expansion, dtype),
            "ln_out": nn.init_layer_norm(d, dtype)}


def init_encoder(cfg: ConformerConfig, rng, dtype=np.float32):
    cfg.validate()
    return {f"block{i}": init_block(rng, cfg.model_dim, cfg.ffn_expansion, cfg.conv_kernel, dtype)
            for i in range(cfg.depth)}


def count_block_params(d, expansion, kernel):
    ffn = 2 * d + (d * expansion * d + expansion * d) + (expansion * d * d + d)
    mhsa = 2 * d + 4 * d * d + 3 * d
    conv = 2 * d + (d * 2 * d + 2 * d) + (kernel * d + d) + 2 * d + (d * d + d)
    return 2 * ffn + mhsa + conv + 2 * d


def count_encoder_params(cfg: ConformerConfig):
    return cfg.depth * count_block_params(cfg.model_dim, cfg.ffn_expansion, cfg.conv_kernel)


# -- sub-networks ------------------------------------------------------------

def ffn(x, p, prenorm=True, dropout=0.0, rng=None):
    h = nn.layer_norm(x, p["ln"]) if prenorm else x
    h = ops.swish(nn.linear(h, p["w1"]))
    h = ops.dropout(h, dropout, rng) if rng is not None else h
    return nn.linear(h, p["w2"])


def ffn_half_step(x, p, prenorm=True, dropout=0.0, rng=None):
    return ops.add(x, ops.scale(ffn(x, p, prenorm, dropout, rng), 0.5))


def _split_heads(t, heads):
    *lead, n, d = t.shape
    t = ops.reshape(t, (*lead, n, heads, d // heads))
    k = len(lead)
    return ops.transpose(t, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(t):
    *lead, h, n, dh = t.shape
    k = len(lead)
    t = ops.transpose(t, tuple(range(k)) + (k + 1, k, k + 2))
    return ops.reshape(t, (*lead, n, h * dh))


def attention(x, p, heads):
    """Full-context multi-head attention (no residual, no norm).

    Returns the projected output and the attention weights ``(..., H, T, T)``.
    """
    d = x.shape[-1]
    if d % heads:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads", "heads")
    q = _split_heads(nn.linear(x, p["q"]), heads)
    k = _split_heads(nn.linear(x, p["k"]), heads)
    v = _split_heads(nn.linear(x, p["v"]), heads)
    nd = k.ndim
    kt = ops.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = ops.scale(ops.bmm(q, kt), 1.0 / math.sqrt(d // heads))
    weights = ops.softmax(scores)
    ctx = _merge_heads(ops.bmm(weights, v))
    return nn.linear(ctx, p["o"]), weights


def mhsa(x, p, heads, return_attention=False, dropout=0.0, rng=None):
    out, weights = attention(nn.layer_norm(x, p["ln"]), p, heads)
    if rng is not None:
        out = ops.dropout(out, dropout, rng)
    y = ops.add(x, out)
    return (y, weights) if return_attention else y


def conv_branch(x, p):
    h = nn.layer_norm(x, p["ln"])
    h = ops.glu(nn.linear(h, p["pw1"]))
    h = ops.depthwise_conv1d(h, p["dw"]["w"], p["dw"]["b"])
    h = ops.swish(nn.layer_norm(h, p["ln2"]))
    return nn.linear(h, p["pw2"])


def conv_module(x, p, dropout=0.0, rng=None):
    out = conv_branch(x, p)
    if rng is not None:
        out = ops.dropout(out, dropout, rng)
    return ops.add(x, out)


def conformer_block(x, p, heads, instrument=False, dropout=0.0, rng=None):
    """One block; with ``instrument=True`` returns every intermediate as a dict."""
    x_tilde = ffn_half_step(x, p["ffn1"], dropout=dropout, rng=rng)
    x_prime, weights = mhsa(x_tilde, p["mhsa"], heads, return_attention=True,
                            dropout=dropout, rng=rng)
    x_dprime = conv_module(x_prime, p["conv"], dropout=dropout, rng=rng)
    y = nn.layer_norm(ffn_half_step(x_dprime, p["ffn2"], dropout=dropout, rng=rng), p["ln_out"])
    if instrument:
        return {"x": x, "x_tilde": x_tilde, "x_prime": x_prime, "x_dprime": x_dprime,
                "y": y, "attention": weights}
    return y


def add_positions(x):
    t, d = x.shape[-2], x.shape[-1]
    pe = np.broadcast_to(ops.sinusoidal_positions(t, d, x.dtype), x.shape)
    return ops.add_const(x, pe)


def encode(x, cfg: ConformerConfig, params, rng=None):
    """Sinusoidal positions once at entry, then ``cfg.depth`` blocks in order."""
    h = add_positions(x)
    for i in range(cfg.depth):
        h = conformer_block(h, params[f"block{i}"], cfg.heads, dropout=cfg.dropout, rng=rng)
    return h


class ConformerEncoder(BaseEstimator, TransformerMixin):
    """Stacked Conformer blocks as a transformer over ``(T, D)`` sequences.

    ``fit`` only allocates parameters (the encoder is trained as part of a
    recognizer); ``transform`` maps a list of sequences to encoded arrays.
    """

    def __init__(self, depth=2, model_dim=64, ffn_expansion=4, heads=4, conv_kernel=5,
                 dtype="f64", random_state=0):
        self.depth = depth
        self.model_dim = model_dim
        self.ffn_expansion = ffn_expansion
        self.heads = heads
        self.conv_kernel = conv_kernel
        self.dtype = dtype
        self.random_state = random_state

    @property
    def config(self):
        return ConformerConfig(depth=self.depth, model_dim=self.model_dim,
                               ffn_expansion=self.ffn_expansion, heads=self.heads,
                               conv_kernel=self.conv_kernel)

    def fit(self, X=None, y=None):
        dtype = np.float64 if self.dtype == "f64" else np.float32
        self.dtype_ = dtype
        self.params_ = init_encoder(self.config, np.random.default_rng(self.random_state), dtype)
        self.n_params_ = nn.count(self.params_)
        return self

    def forward(self, x):
        check_is_fitted(self, "params_")
        return encode(x, self.config, self.params_)

    def transform(self, X):
        check_is_fitted(self, "params_")
        out = []
        with no_grad():
            for seq in X:
                seq = np.asarray(seq, dtype=self.dtype_)
                if seq.ndim != 2 or seq.shape[1] != self.model_dim:
                    raise ConfigError(f"expected (T, {self.model_dim}) input, got {seq.shape}")
                out.append(self.forward(Tensor(seq)).data)
        return out
