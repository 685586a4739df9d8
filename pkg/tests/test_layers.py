"""Memory block kinds, query pipeline toggles, batch norm behavior."""

import numpy as np
import pytest

from headmem.layers import (
    MemoryLayerKind,
    batchnorm_query,
    init_batchnorm,
    init_headwise_bank,
    init_linear_bank,
    init_pkm_bank,
    memory_block_forward,
)
from headmem.memory import MemoryConfig, build_value_cache
from headmem.model import init_transformer_block
from headmem.numerics import make_rng, precision
from headmem.upscale import _init_memory_block


def test_kind_defaults():
    lin = MemoryLayerKind.defaults("linear")
    assert (lin.query_batchnorm, lin.query_layernorm,
            lin.internal_residual, lin.output_projection) == (True, False, True, True)
    pkm = MemoryLayerKind.defaults("pkm")
    assert (pkm.query_batchnorm, pkm.query_layernorm,
            pkm.internal_residual, pkm.output_projection) == (True, False, True, True)
    hw = MemoryLayerKind.defaults("headwise")
    assert (hw.query_batchnorm, hw.query_layernorm,
            hw.internal_residual, hw.output_projection) == (False, False, False, False)
    with pytest.raises(ValueError):
        MemoryLayerKind("dense")


def test_batchnorm_training_normalizes_and_tracks():
    rng = make_rng(0)
    with precision("f64"):
        bn = init_batchnorm(5)
    x = 3.0 + 2.0 * rng.standard_normal((64, 5))
    out, _ = batchnorm_query(x, bn, training=True)
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-10)
    assert np.allclose(out.var(axis=0), 1.0, atol=1e-6)  # biased variance
    assert np.allclose(bn.running_mean, 0.1 * x.mean(axis=0), atol=1e-10)
    # eval path uses the running statistics, not the batch
    out_eval, _ = batchnorm_query(x[:4], bn, training=False)
    want = ((x[:4] - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
            * bn.gamma + bn.beta)
    assert np.allclose(out_eval, want, atol=1e-12)


def test_batchnorm_eval_does_not_mutate_stats():
    with precision("f64"):
        bn = init_batchnorm(3)
    before = bn.running_mean.copy(), bn.running_var.copy()
    batchnorm_query(make_rng(1).standard_normal((8, 3)), bn, training=False)
    assert np.array_equal(bn.running_mean, before[0])
    assert np.array_equal(bn.running_var, before[1])


def _fresh_block(kind, seed=0, toggles=None):
    rng = make_rng(seed)
    cfg = MemoryConfig(heads=2, n=6, k=3, d=12, fused_threshold=4)
    source = init_transformer_block(12, 2, 20, rng)
    lk = toggles if toggles is not None else MemoryLayerKind.defaults(kind)
    return _init_memory_block(source, lk, cfg, rng), cfg, rng


@pytest.mark.parametrize("kind", ["linear", "pkm", "headwise"])
def test_memory_block_is_identity_at_init(kind):
    with precision("f64"):
        p, cfg, rng = _fresh_block(kind)
        x = rng.standard_normal((7, cfg.d))
        y, cache = memory_block_forward(x, p, training=True)
    assert np.array_equal(y, x)  # zero value tables add nothing
    assert cache["mem"]["kind"] == kind


@pytest.mark.parametrize("kind", ["linear", "pkm", "headwise"])
def test_memory_block_responds_once_values_set(kind):
    with precision("f64"):
        p, cfg, rng = _fresh_block(kind, seed=1)
        if kind == "headwise":
            p.bank.values.v_base[...] = rng.standard_normal(p.bank.values.v_base.shape)
        else:
            p.bank.values[...] = rng.standard_normal(p.bank.values.shape)
        x = rng.standard_normal((5, cfg.d))
        y, _ = memory_block_forward(x, p, training=True)
    assert not np.array_equal(y, x)


def test_headwise_cached_forward_matches_training_path():
    with precision("f64"):
        p, cfg, rng = _fresh_block("headwise", seed=2)
        p.bank.values.v_base[...] = rng.standard_normal(p.bank.values.v_base.shape)
        x = rng.standard_normal((6, cfg.d))
        y_train, _ = memory_block_forward(x, p, training=False)
        cache = build_value_cache(p.bank.values)
        y_cached, fwd_cache = memory_block_forward(x, p, training=False,
                                                   value_cache=cache)
    assert np.max(np.abs(y_train - y_cached)) < 1e-10
    assert fwd_cache["mem"]["pooled"] is None  # cached path skips raw pooling


def test_value_cache_rejected_in_training():
    with precision("f64"):
        p, cfg, rng = _fresh_block("headwise", seed=3)
        cache = build_value_cache(p.bank.values)
        x = rng.standard_normal((4, cfg.d))
        with pytest.raises(ValueError):
            memory_block_forward(x, p, training=True, value_cache=cache)


def test_route_override_changes_nothing_numerically():
    with precision("f64"):
        p, cfg, rng = _fresh_block("pkm", seed=4)
        p.bank.values[...] = rng.standard_normal(p.bank.values.shape)
        x = rng.standard_normal((9, cfg.d))
        outs = []
        for route in ("two_stage", "fused", "auto"):
            p2, _, _ = _fresh_block("pkm", seed=4)
            p2.bank.values[...] = p.bank.values
            p2.route = route
            y, _ = memory_block_forward(x, p2, training=False)
            outs.append(y)
    assert np.array_equal(outs[0], outs[1])
    assert np.array_equal(outs[0], outs[2])


def test_all_toggles_pipeline_runs_for_headwise():
    toggles = MemoryLayerKind("headwise", query_batchnorm=True,
                              query_layernorm=True, internal_residual=True,
                              output_projection=True)
    with precision("f64"):
        p, cfg, rng = _fresh_block("headwise", toggles=toggles, seed=5)
        assert p.query_bn is not None and p.query_ln_gain is not None
        assert p.attn.w_o is not None
        x = rng.standard_normal((5, cfg.d))
        y, cache = memory_block_forward(x, p, training=True)
    assert np.array_equal(y, x)  # still identity: values are zero
    assert cache["mem"]["bn"] is not None and cache["mem"]["ln"] is not None


def test_linear_and_pkm_support_layernorm_toggle():
    for kind in ("linear", "pkm"):
        toggles = MemoryLayerKind(kind, query_batchnorm=False,
                                  query_layernorm=True, internal_residual=True,
                                  output_projection=True)
        with precision("f64"):
            p, cfg, rng = _fresh_block(kind, toggles=toggles, seed=6)
            assert p.query_bn is None and p.query_ln_gain is not None
            x = rng.standard_normal((4, cfg.d))
            y, cache = memory_block_forward(x, p, training=True)
        assert np.array_equal(y, x)
        assert cache["mem"]["ln"] is not None


def test_bank_initializers_shapes():
    cfg = MemoryConfig(heads=2, n=4, k=2, d=8)
    rng = make_rng(7)
    lin = init_linear_bank(cfg, rng)
    assert lin.keys.shape == (2, 16, 4) and lin.values.shape == (16, 8)
    assert lin.w_q.shape == (8, 8) and np.all(lin.values == 0)
    pkm = init_pkm_bank(cfg, rng)
    assert pkm.pk.k_row.shape == (2, 4, 2) and pkm.values.shape == (16, 8)
    hw = init_headwise_bank(cfg, rng)
    assert hw.values.v_base.shape == (16, 4)
    assert hw.values.w_heads.shape == (2, 4, 4)
