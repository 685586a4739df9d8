"""Decoder backbone pieces: rotary embedding, causal attention, gated FFN."""

import numpy as np
import pytest

from headmem.model import init_attention, init_transformer_block
from headmem.numerics import make_rng, precision, rms_norm
from headmem.transformer import (
    apply_rope,
    causal_attention,
    ffn_forward,
    lm_loss,
    rms_norm_fwd,
    rope_tables,
    sigmoid,
    split_heads,
    merge_heads,
    transformer_block_forward,
)


def test_rope_tables_are_unit_rotations():
    cos, sin = rope_tables(6, 8, 10000.0, np.float64)
    assert cos.shape == (6, 4) and sin.shape == (6, 4)
    assert np.allclose(cos * cos + sin * sin, 1.0, atol=1e-12)
    # position zero rotates by nothing
    assert np.allclose(cos[0], 1.0) and np.allclose(sin[0], 0.0)


def test_apply_rope_preserves_norm_and_inverts():
    rng = make_rng(1)
    x = rng.standard_normal((3, 5, 8))  # [heads, s, d_h]
    cos, sin = rope_tables(5, 8, 10000.0, np.float64)
    y = apply_rope(x, cos, sin)
    assert np.allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1),
                       atol=1e-12)
    back = apply_rope(y, cos, sin, inverse=True)
    assert np.allclose(back, x, atol=1e-12)


def test_rope_relative_position_property():
    # dot products depend only on the position gap
    rng = make_rng(2)
    q = rng.standard_normal(8)
    k = rng.standard_normal(8)
    cos, sin = rope_tables(10, 8, 10000.0, np.float64)

    def rot(v, p):
        return apply_rope(v[None, None], cos[p:p + 1], sin[p:p + 1])[0, 0]

    d1 = rot(q, 3) @ rot(k, 1)
    d2 = rot(q, 7) @ rot(k, 5)
    assert abs(d1 - d2) < 1e-10


def test_split_merge_heads_round_trip():
    rng = make_rng(3)
    x = rng.standard_normal((5, 12))
    h = split_heads(x, 3)
    assert h.shape == (3, 5, 4)
    assert np.array_equal(merge_heads(h), x)


def test_attention_is_causal():
    rng = make_rng(4)
    with precision("f64"):
        p = init_attention(16, 2, rng)
    xn = rng.standard_normal((7, 16))
    out1, _ = causal_attention(xn, p)
    bumped = xn.copy()
    bumped[5] += 3.0  # future token
    out2, _ = causal_attention(bumped, p)
    assert np.allclose(out1[:5], out2[:5], atol=0)
    assert not np.allclose(out1[5], out2[5])


def test_attention_weights_rows_sum_to_one():
    rng = make_rng(5)
    with precision("f64"):
        p = init_attention(8, 2, rng)
    _, cache = causal_attention(rng.standard_normal((6, 8)), p)
    attn = cache["attn"]  # [heads, s, s]
    assert np.allclose(attn.sum(axis=-1), 1.0, atol=1e-12)
    assert np.allclose(attn, np.tril(attn), atol=0)  # no future mass


def test_attention_raw_heads_output():
    rng = make_rng(6)
    with precision("f64"):
        p = init_attention(8, 2, rng, with_projection=False)
    assert p.w_o is None
    out, cache = causal_attention(rng.standard_normal((4, 8)), p,
                                  project_output=False)
    assert np.array_equal(out, merge_heads(cache["ctx"]))


def test_rms_norm_fwd_matches_functional():
    rng = make_rng(7)
    x = rng.standard_normal((4, 6))
    g = rng.standard_normal(6)
    y, cache = rms_norm_fwd(x, g)
    assert np.array_equal(y, rms_norm(x, g))
    assert cache["x"] is x


def test_sigmoid_extremes_and_ffn_gating():
    assert sigmoid(np.array([800.0]))[0] == 1.0
    assert sigmoid(np.array([-800.0]))[0] == 0.0
    rng = make_rng(8)
    w_gate = rng.standard_normal((6, 9))
    w_up = rng.standard_normal((6, 9))
    w_down = rng.standard_normal((9, 6))
    from headmem.transformer import FfnParams
    z = rng.standard_normal((3, 6))
    out, cache = ffn_forward(z, FfnParams(w_gate, w_up, w_down))
    g = z @ w_gate
    want = (g * sigmoid(g) * (z @ w_up)) @ w_down
    assert np.allclose(out, want, atol=1e-12)
    assert cache["z"] is z


def test_lm_loss_matches_manual_cross_entropy():
    rng = make_rng(9)
    logits = rng.standard_normal((5, 11))
    targets = rng.integers(0, 11, 5)
    p = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    want = -np.mean(np.log(p[np.arange(5), targets]))
    assert abs(lm_loss(logits, targets) - want) < 1e-12
    with pytest.raises(ValueError):
        lm_loss(logits, rng.integers(0, 11, 4))
    with pytest.raises(ValueError):
        lm_loss(logits, np.array([0, 1, 2, 3, 11]))


def test_block_with_zeroed_outputs_is_identity():
    rng = make_rng(10)
    with precision("f64"):
        p = init_transformer_block(12, 2, 20, rng)
    p.attn.w_o[...] = 0.0
    p.ffn.w_down[...] = 0.0
    x = rng.standard_normal((5, 12))
    y, _ = transformer_block_forward(x, p)
    assert np.array_equal(y, x)


def test_block_forward_cache_structure():
    rng = make_rng(11)
    with precision("f64"):
        p = init_transformer_block(8, 2, 12, rng)
    x = rng.standard_normal((3, 8))
    y, cache = transformer_block_forward(x, p)
    assert y.shape == x.shape
    assert set(cache) == {"norm1", "attn", "norm2", "ffn"}


def test_forward_and_backward_preserve_f32():
    """A 32-bit model must compute in 32 bits end to end; the attention
    scale and causal mask are the easy places to leak a float64 upcast."""
    from headmem.gradients import lm_loss_backward, model_backward
    from headmem.model import init_base_model, model_forward, named_params

    with precision("f32"):
        model = init_base_model(vocab=20, d=16, heads=2, d_ff=24, depth=2,
                                rng=make_rng(12))
    toks = make_rng(13).integers(0, 20, 7)
    logits, caches = model_forward(toks, model, training=True, collect=True)
    assert logits.dtype == np.float32

    def leaks(obj):
        if isinstance(obj, dict):
            return sum(leaks(v) for v in obj.values())
        if isinstance(obj, (list, tuple)):
            return sum(leaks(v) for v in obj)
        if isinstance(obj, np.ndarray) and obj.dtype == np.float64:
            return 1
        return 0

    assert leaks(caches) == 0
    grads = model_backward(lm_loss_backward(logits, toks), caches, model)
    for path, _ in named_params(model):
        assert grads[path].dtype == np.float32, path
