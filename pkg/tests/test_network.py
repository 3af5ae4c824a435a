import numpy as np
import pytest

import gradcases
from hclinpaint import autodiff as ad
from hclinpaint.autodiff import Tape, Tensor, backward
from hclinpaint.config import DetectorConfig, ModelConfig, RunConfig
from hclinpaint.network import (
    ContractError,
    decode_restore,
    encode,
    init_params,
    mask_bias,
    mask_windows,
    mca_attention,
    transformer_block,
    window_attention,
    window_partition,
    window_reverse,
)
from hclinpaint.training import loss_terms


@pytest.fixture(scope="module")
def params():
    return init_params(ModelConfig(), DetectorConfig(), seed=0)


@pytest.mark.parametrize("size", [32, 64])
def test_encode_shapes(params, size):
    cfg = ModelConfig(image_size=size)
    if (size // 8) % cfg.window:
        pytest.skip("coarsest stage does not tile")
    f = encode(np.random.default_rng(0).random((2, 3, size, size)), params, cfg)
    assert f[1].shape == (2, 32, size // 8, size // 8)
    assert f[2].shape == (2, 24, size // 4, size // 4)
    assert f[3].shape == (2, 16, size // 2, size // 2)


def test_encode_rejects_bad_size(params):
    with pytest.raises(ContractError):
        encode(np.zeros((3, 60, 60)), params, ModelConfig())


def test_encode_deterministic(params):
    x = np.random.default_rng(1).random((3, 64, 64))
    a, b = encode(x, params, ModelConfig()), encode(x, params, ModelConfig())
    for s in (1, 2, 3):
        np.testing.assert_array_equal(a[s].data, b[s].data)


def test_window_round_trip():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 8, 12)))
    w = window_partition(x, 4)
    assert w.shape == (2 * 2 * 3, 16, 3)
    np.testing.assert_array_equal(window_reverse(w, 4, 2, 8, 12).data, x.data)
    m = np.arange(2 * 8 * 12).reshape(2, 8, 12).astype(float)
    tok = window_partition(Tensor(m[:, None]), 4).data[..., 0]
    np.testing.assert_array_equal(mask_windows(m, 4), tok)


def test_mask_bias_values():
    np.testing.assert_array_equal(mask_bias(np.array([1.0, 0.0, 1.0]), 100.0), [0.0, -100.0, 0.0])
    assert np.all(mask_bias(np.ones((4, 4)), 100.0) == 0)
    with pytest.raises(ContractError):
        mask_bias(np.array([0.5, 1.0]), 100.0)
    with pytest.raises(ContractError):
        mask_bias(np.ones(3), 0.0)


def test_unmasked_bias_equals_no_bias():
    rng = np.random.default_rng(4)
    p = gradcases.block_params(rng, 4)
    x = Tensor(rng.normal(size=(3, 4, 4)))
    a = window_attention(x, None, p, "b", 2).data
    b = window_attention(x, mask_bias(np.ones((3, 4)), 100.0), p, "b", 2).data
    np.testing.assert_array_equal(a, b)


def test_single_token_attention_is_value_projection():
    rng = np.random.default_rng(5)
    p = gradcases.block_params(rng, 4)
    x = rng.normal(size=(1, 4))
    out = mca_attention(Tensor(x), np.ones((1, 1)), p, "b", (1, 1), heads=2, window=1, gamma=100.0).data
    v = (x @ p["b.qkv_w"].data + p["b.qkv_b"].data)[:, 8:]
    np.testing.assert_allclose(out, v @ p["b.proj_w"].data + p["b.proj_b"].data, rtol=1e-12)


def test_mca_divisibility():
    p = gradcases.block_params(np.random.default_rng(0), 4)
    with pytest.raises(ContractError):
        mca_attention(Tensor(np.ones((12, 4))), None, p, "b", (3, 4), heads=2, window=2, gamma=100.0)
    with pytest.raises(ContractError):
        window_attention(Tensor(np.ones((1, 4, 4))), None, p, "b", heads=3)


def test_zero_weight_block_is_identity():
    rng = np.random.default_rng(6)
    p = {k: Tensor(np.zeros_like(v.data)) for k, v in gradcases.block_params(rng, 4).items()}
    x = rng.normal(size=(2, 4, 4))
    np.testing.assert_array_equal(transformer_block(Tensor(x), None, p, "b", 2).data, x)


def test_block_shape_preserved(params):
    x = Tensor(np.random.default_rng(0).normal(size=(5, 16, 32)))
    assert transformer_block(x, None, params, "enc1.blk0", 2).shape == (5, 16, 32)


def test_compose_identities(params):
    cfg = ModelConfig()
    rng = np.random.default_rng(2)
    x = rng.random((1, 3, 64, 64))
    feats = encode(x, params, cfg)
    ones = {s: np.ones((1, 64 >> (4 - s), 64 >> (4 - s))) for s in (1, 2, 3)}
    zeros = {s: np.zeros_like(m) for s, m in ones.items()}
    content, restored = decode_restore(feats, ones, x, params, cfg)
    np.testing.assert_array_equal(restored.data, x)
    content, restored = decode_restore(feats, zeros, x, params, cfg)
    np.testing.assert_array_equal(restored.data, content.data)
    assert content.shape == x.shape
    mixed = {s: (rng.random(m.shape) > 0.5).astype(float) for s, m in ones.items()}
    _, restored = decode_restore(feats, mixed, x, params, cfg)
    assert restored.data.min() >= 0 and restored.data.max() <= 1
    with pytest.raises(ContractError):
        decode_restore(feats, {1: ones[1], 2: ones[2]}, x, params, cfg)


def test_every_parameter_gets_gradient():
    cfg = RunConfig()
    seen = set()
    for seed in range(5):
        p = init_params(cfg.model, cfg.detector, seed)
        for t in p.values():
            t.requires_grad = True
        rng = np.random.default_rng(seed)
        x = rng.random((2, 3, 64, 64))
        mask = np.ones((2, 64, 64))
        mask[:, 10:40, 20:50] = 0
        with Tape() as tape:
            terms = loss_terms(p, cfg, x, rng.random((2, 3, 64, 64)), mask, rng)
            total = sum(terms.values(), Tensor(0.0))
        backward(total, tape)
        seen |= {k for k, t in p.items() if t.grad is not None and np.any(t.grad != 0)}
    assert seen == set(p)


def test_masked_keys_are_suppressed():
    rng = np.random.default_rng(7)
    logits = rng.uniform(-5, 5, size=(4, 16))
    m = (rng.random((4, 16)) > 0.4).astype(float)
    m[:, 0] = 1
    att = ad.softmax(Tensor(logits + mask_bias(m, 100.0))).data
    assert np.all(att[m == 0] <= np.exp(-100 + 10))
