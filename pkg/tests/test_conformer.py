import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from avsk import nn
from avsk.autodiff import Tensor, ops
from avsk.config import ConformerConfig
from avsk.conformer import (ConformerEncoder, add_positions, attention, conformer_block,
                            conv_module, count_encoder_params, encode, ffn_half_step,
                            init_block, init_conv_module, init_encoder, init_ffn, init_mhsa,
                            mhsa)
from avsk.errors import ConfigError

from oracles import block_grad_error, block_identity_errors, naive_conv_module, naive_mhsa


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def zero_linears(tree):
    """Zero every weight matrix and bias but keep LayerNorm gains at 1."""
    for name, leaf in nn.flatten(tree).items():
        if not name.endswith(".g"):
            leaf.data[...] = 0.0


# -- block identities --------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_block_identities_hold(seed):
    errs = block_identity_errors(seed)
    assert max(errs.values()) < 1e-10, errs


def test_ffn_zero_weights_is_identity():
    rng = np.random.default_rng(0)
    p = init_ffn(rng, 4, 2, np.float64)
    zero_linears(p)
    x = rng.standard_normal((3, 4))
    assert np.array_equal(ffn_half_step(T(x), p).data, x)


def test_ffn_closed_form_scalar():
    p = {"ln": nn.init_layer_norm(1, np.float64),
         "w1": {"w": nn.param([[1.0]], np.float64), "b": nn.param([0.0], np.float64)},
         "w2": {"w": nn.param([[2.0]], np.float64), "b": nn.param([0.0], np.float64)}}
    y = ffn_half_step(T([[1.0]]), p, prenorm=False).data[0, 0]
    swish1 = 1.0 / (1.0 + math.exp(-1.0))
    assert abs(y - (1.0 + swish1)) < 1e-12
    assert round(y, 4) == 1.7311


def test_ffn_residual_scales_linearly():
    rng = np.random.default_rng(1)
    p = init_ffn(rng, 4, 2, np.float64)
    x = rng.standard_normal((3, 4))
    d1 = ffn_half_step(T(x), p).data - x
    p["w2"]["w"].data *= 2.0
    p["w2"]["b"].data *= 2.0
    d2 = ffn_half_step(T(x), p).data - x
    assert np.allclose(d2, 2.0 * d1, atol=1e-14)


def test_mhsa_zero_output_projection():
    rng = np.random.default_rng(2)
    p = init_mhsa(rng, 4, np.float64)
    p["o"]["w"].data[...] = 0.0
    x = rng.standard_normal((3, 4))
    assert np.array_equal(mhsa(T(x), p, heads=2).data, x)


def test_mhsa_identical_rows_split_evenly():
    p = init_mhsa(np.random.default_rng(3), 4, np.float64)
    _, w = mhsa(T(np.tile([[0.3, -1.0, 2.0, 0.5]], (2, 1))), p, 2, return_attention=True)
    assert np.allclose(w.data, 0.5, atol=1e-15)


def test_mhsa_matches_hand_oracle():
    rng = np.random.default_rng(4)
    p = init_mhsa(rng, 2, np.float64)
    for name in ("q", "k", "v", "o"):
        p[name]["w"].data[...] = rng.standard_normal((2, 2))
        if "b" in p[name]:
            p[name]["b"].data[...] = rng.standard_normal(2)
    x = rng.standard_normal((3, 2))
    got = mhsa(T(x), p, heads=1).data
    assert np.abs(got - (x + naive_mhsa(x, p, 1))).max() < 1e-10


def test_mhsa_head_divisibility():
    p = init_mhsa(np.random.default_rng(5), 6, np.float64)
    with pytest.raises(ConfigError):
        attention(T(np.ones((2, 6))), p, heads=4)


def test_attention_rows_are_distributions():
    rng = np.random.default_rng(6)
    p = init_mhsa(rng, 8, np.float64)
    _, w = attention(T(rng.standard_normal((2, 7, 8)) * 5), p, heads=2)
    assert np.all(w.data >= 0)
    assert np.abs(w.data.sum(axis=-1) - 1.0).max() < 1e-12


def test_conv_module_zero_output_weights():
    rng = np.random.default_rng(7)
    p = init_conv_module(rng, 4, 3, np.float64)
    p["pw2"]["w"].data[...] = 0.0
    p["pw2"]["b"].data[...] = 0.0
    x = rng.standard_normal((5, 4))
    assert np.array_equal(conv_module(T(x), p).data, x)


@pytest.mark.parametrize("kernel", [3, 5])
def test_conv_module_receptive_field(kernel):
    rng = np.random.default_rng(8)
    p = init_conv_module(rng, 4, kernel, np.float64)
    x = rng.standard_normal((11, 4))
    base = conv_module(T(x), p).data
    x2 = x.copy()
    x2[5] += 3.0
    diff = np.abs(conv_module(T(x2), p).data - base).max(axis=1)
    r = (kernel - 1) // 2
    changed = np.flatnonzero(diff > 0)
    assert changed.min() == 5 - r and changed.max() == 5 + r


def test_conv_module_matches_composed_oracle():
    rng = np.random.default_rng(9)
    p = init_conv_module(rng, 4, 3, np.float64)
    for leaf in nn.flatten(p).values():
        leaf.data[...] = rng.standard_normal(leaf.shape)
    x = rng.standard_normal((6, 4))
    got = conv_module(T(x), p).data
    assert np.abs(got - (x + naive_conv_module(x, p))).max() < 1e-10


def test_conv_module_even_kernel():
    with pytest.raises(ConfigError):
        init_conv_module(np.random.default_rng(0), 4, 4, np.float64)


def test_block_all_zero_is_layer_norm():
    rng = np.random.default_rng(10)
    p = init_block(rng, 4, 2, 3, np.float64)
    zero_linears(p)
    x = rng.standard_normal((5, 4))
    y = conformer_block(T(x), p, heads=2).data
    assert np.allclose(y, ops.normalize(T(x)).data, atol=1e-14)


@pytest.mark.parametrize("t", [1, 2, 7])
def test_block_preserves_shape(t):
    rng = np.random.default_rng(t)
    p = init_block(rng, 8, 2, 3, np.float64)
    assert conformer_block(T(rng.standard_normal((t, 8))), p, 2).shape == (t, 8)


def test_block_full_context():
    rng = np.random.default_rng(11)
    p = init_block(rng, 8, 2, 3, np.float64)
    x = rng.standard_normal((9, 8))
    base = conformer_block(T(x), p, 2).data
    x2 = x.copy()
    x2[0] += rng.standard_normal(8)  # not a per-row constant, which LayerNorm would erase
    diff = np.abs(conformer_block(T(x2), p, 2).data - base).max(axis=1)
    assert np.all(diff > 1e-6)  # the conv module alone would stop at |dt| <= 1


@pytest.mark.parametrize("seed", range(2))
def test_block_gradient(seed):
    assert block_grad_error(seed) < 1e-4


# -- encoder ----------------------------------------------------------------------------


def test_encode_depth_zero_adds_positions():
    cfg = ConformerConfig(depth=0, model_dim=8, heads=2, conv_kernel=3)
    x = np.random.default_rng(12).standard_normal((5, 8))
    y = encode(T(x), cfg, {}).data
    assert np.array_equal(y, x + ops.sinusoidal_positions(5, 8))


def test_encode_depth_two_is_composition():
    cfg = ConformerConfig(depth=2, model_dim=8, heads=2, conv_kernel=3)
    rng = np.random.default_rng(13)
    p = init_encoder(cfg, rng, np.float64)
    x = T(rng.standard_normal((4, 8)))
    manual = conformer_block(conformer_block(add_positions(x), p["block0"], 2), p["block1"], 2)
    assert np.array_equal(encode(x, cfg, p).data, manual.data)


def test_encoder_stays_finite():
    cfg = ConformerConfig(depth=2, model_dim=16, heads=4, conv_kernel=5)
    rng = np.random.default_rng(14)
    p = init_encoder(cfg, rng, np.float64)
    for _ in range(100):
        t = int(rng.integers(1, 12))
        y = encode(T(rng.standard_normal((t, 16)) * 10), cfg, p).data
        assert np.isfinite(np.linalg.norm(y))


def test_encoder_param_count():
    cfg = ConformerConfig(depth=3, model_dim=16, heads=4, conv_kernel=5, ffn_expansion=3)
    assert nn.count(init_encoder(cfg, np.random.default_rng(0))) == count_encoder_params(cfg)


def test_encoder_batch_rows_independent():
    cfg = ConformerConfig(depth=1, model_dim=8, heads=2, conv_kernel=3)
    rng = np.random.default_rng(15)
    p = init_encoder(cfg, rng, np.float64)
    xb = rng.standard_normal((3, 5, 8))
    batched = encode(T(xb), cfg, p).data
    for i in range(3):
        assert np.allclose(batched[i], encode(T(xb[i]), cfg, p).data, atol=1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        ConformerConfig(model_dim=10, heads=4).validate()
    with pytest.raises(ConfigError):
        ConformerConfig(conv_kernel=4).validate()


def test_estimator_protocol():
    enc = ConformerEncoder(depth=1, model_dim=8, heads=2, conv_kernel=3)
    assert clone(enc).get_params()["model_dim"] == 8
    with pytest.raises(NotFittedError):
        enc.transform([np.zeros((2, 8))])
    enc.fit()
    out = enc.transform([np.ones((3, 8)), np.zeros((1, 8))])
    assert [o.shape for o in out] == [(3, 8), (1, 8)]
    with pytest.raises(ConfigError):
        enc.transform([np.ones((3, 4))])
