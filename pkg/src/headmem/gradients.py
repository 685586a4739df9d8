"""Hand-derived backward passes for every layer in the stack.

No autodiff anywhere: each forward cache carries exactly what its backward
consumes, and model_backward walks the block list in reverse accumulating
parameter gradients into a GradStore keyed by the dotted parameter paths
from model.named_params.

Selection is treated as a constant routing decision: gradients flow through
the softmax weights and the value rows of the selected slots only, and
sub-keys receive gradient only through their selected additive scores.
There is no straight-through approximation.

The value-table gradient uses the deduplicated scatter: per-contribution
gradients are pre-aggregated over the unique slot ids touched in the batch,
then written to the full table in one indexed pass. The result is bitwise
identical to the naive one-write-per-contribution scatter because each
slot's contributions accumulate in the same order either way.
"""

from __future__ import annotations

import math

import numpy as np

from .layers import MemoryBlockParams
from .model import ModelSpec
from .numerics import softmax
from .transformer import (
    AttentionParams,
    TransformerBlockParams,
    apply_rope,
    merge_heads,
    split_heads,
)


class GradStore(dict):
    """Accumulated parameter gradients, optionally restricted to a path set.

    Paths outside `allowed` are dropped at the door, which is what keeps
    frozen parameter groups at exactly zero accumulated gradient.
    """

    def __init__(self, allowed: set[str] | None = None):
        super().__init__()
        self.allowed = allowed

    def add(self, path: str, g: np.ndarray) -> None:
        if self.allowed is not None and path not in self.allowed:
            return
        if path in self:
            self[path] += g
        else:
            self[path] = g

    def total_abs(self) -> float:
        return float(sum(np.sum(np.abs(g)) for g in self.values()))


# ---------------------------------------------------------------------------
# scatter kernels

def dedup_scatter_backward(g_out: np.ndarray, idx: np.ndarray, w: np.ndarray,
                           table_size: int, counter: dict | None = None) -> np.ndarray:
    """Gradient of out[b] = sum_k w[b, k] * table[idx[b, k]] w.r.t. the table.

    g_out [B, D], idx [B, K], w [B, K] -> [table_size, D]. Contributions are
    expanded to one row per (b, k), pre-aggregated over the unique ids via an
    indexed add, and written to the table in a single pass over those unique
    rows. counter, when given, tallies 'writes' (unique ids, the global-table
    touches) and 'contributions' (B * K).
    """
    B, K = idx.shape
    D = g_out.shape[-1]
    if np.any(idx < 0) or np.any(idx >= table_size):
        raise ValueError(f"slot index out of range for table of {table_size}")
    g_token = (g_out[:, None, :] * w[:, :, None]).reshape(B * K, D)
    flat = idx.reshape(B * K)
    uniq, inv = np.unique(flat, return_inverse=True)
    g_agg = np.zeros((uniq.size, D), dtype=g_out.dtype)
    np.add.at(g_agg, inv, g_token)
    g_table = np.zeros((table_size, D), dtype=g_out.dtype)
    g_table[uniq] = g_agg
    if counter is not None:
        counter["writes"] = counter.get("writes", 0) + int(uniq.size)
        counter["contributions"] = counter.get("contributions", 0) + B * K
    return g_table


def naive_scatter_backward(g_out: np.ndarray, idx: np.ndarray, w: np.ndarray,
                           table_size: int) -> np.ndarray:
    """Reference scatter: one indexed add per contribution, no dedup."""
    B, K = idx.shape
    g_token = (g_out[:, None, :] * w[:, :, None]).reshape(B * K, -1)
    g_table = np.zeros((table_size, g_out.shape[-1]), dtype=g_out.dtype)
    np.add.at(g_table, idx.reshape(B * K), g_token)
    return g_table


def weight_grad_backward(g_out: np.ndarray, idx: np.ndarray,
                         table: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pooling weights: grad[b, k] = g_out[b] . table[idx[b, k]]."""
    if np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise ValueError(f"slot index out of range for table of {table.shape[0]}")
    return np.einsum("bd,bkd->bk", g_out, table[idx])


# ---------------------------------------------------------------------------
# dense layer backwards

def softmax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    dot = np.sum(dy * y, axis=-1, keepdims=True)
    return y * (dy - dot)


def rms_norm_backward(dy: np.ndarray, cache: dict):
    x, inv, gain = cache["x"], cache["inv"], cache["gain"]
    d = x.shape[-1]
    gy = dy * gain
    dot = np.sum(gy * x, axis=-1, keepdims=True)
    dx = gy * inv - x * (inv ** 3 / d) * dot
    dgain = np.sum(dy * x * inv, axis=tuple(range(x.ndim - 1)))
    return dx, dgain


def lm_loss_backward(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    s = logits.shape[0]
    d = softmax(logits, axis=-1)
    d[np.arange(s), targets] -= 1.0
    return d / s


def batchnorm_backward(dy: np.ndarray, cache: dict):
    xhat, inv, gamma = cache["xhat"], cache["inv"], cache["gamma"]
    dgamma = np.sum(dy * xhat, axis=0)
    dbeta = np.sum(dy, axis=0)
    if cache["training"]:
        dxhat = dy * gamma
        dx = inv * (dxhat - np.mean(dxhat, axis=0)
                    - xhat * np.mean(dxhat * xhat, axis=0))
    else:
        dx = dy * gamma * inv
    return dx, dgamma, dbeta


def attention_backward(dout: np.ndarray, cache: dict, p: AttentionParams,
                       grads: GradStore, prefix: str,
                       probe: dict | None = None) -> np.ndarray:
    """Backward of causal_attention; returns the gradient w.r.t. xn.

    probe, when given, records (per-head outputs, their gradients) under
    `prefix`, which is what head-importance scoring reads.
    """
    xn = cache["xn"]
    d_h = xn.shape[1] // p.heads
    if cache["project"]:
        grads.add(f"{prefix}.w_o", cache["cat"].T @ dout)
        dcat = dout @ p.w_o.T
    else:
        dcat = dout
    dctx = split_heads(dcat, p.heads)  # [H, s, d_h]
    if probe is not None:
        probe[prefix] = (cache["ctx"], dctx)
    attn, v, qr, kr = cache["attn"], cache["v"], cache["qr"], cache["kr"]
    dattn = dctx @ v.transpose(0, 2, 1)  # [H, s, s]
    dv = attn.transpose(0, 2, 1) @ dctx
    dscores = softmax_backward(attn, dattn) / math.sqrt(d_h)
    dqr = dscores @ kr
    dkr = dscores.transpose(0, 2, 1) @ qr
    dq = merge_heads(apply_rope(dqr, cache["cos"], cache["sin"], inverse=True))
    dk = merge_heads(apply_rope(dkr, cache["cos"], cache["sin"], inverse=True))
    dvf = merge_heads(dv)
    grads.add(f"{prefix}.w_q", xn.T @ dq)
    grads.add(f"{prefix}.w_k", xn.T @ dk)
    grads.add(f"{prefix}.w_v", xn.T @ dvf)
    return dq @ p.w_q.T + dk @ p.w_k.T + dvf @ p.w_v.T


def ffn_backward(dy: np.ndarray, cache: dict, p, grads: GradStore,
                 prefix: str) -> np.ndarray:
    z, g, u, sg, h = cache["z"], cache["g"], cache["u"], cache["sg"], cache["h"]
    grads.add(f"{prefix}.w_down", h.T @ dy)
    dh = dy @ p.w_down.T
    du = dh * (g * sg)
    dg = dh * u * (sg * (1.0 + g * (1.0 - sg)))  # silu'(g)
    grads.add(f"{prefix}.w_gate", z.T @ dg)
    grads.add(f"{prefix}.w_up", z.T @ du)
    return dg @ p.w_gate.T + du @ p.w_up.T


def transformer_block_backward(dy: np.ndarray, cache: dict, p: TransformerBlockParams,
                               grads: GradStore, prefix: str,
                               probe: dict | None = None) -> np.ndarray:
    dxn2 = ffn_backward(dy, cache["ffn"], p.ffn, grads, f"{prefix}.ffn")
    da_norm, dg2 = rms_norm_backward(dxn2, cache["norm2"])
    grads.add(f"{prefix}.ffn_gain", dg2)
    da = dy + da_norm
    dxn1 = attention_backward(da, cache["attn"], p.attn, grads, f"{prefix}.attn", probe)
    dx_norm, dg1 = rms_norm_backward(dxn1, cache["norm1"])
    grads.add(f"{prefix}.attn_gain", dg1)
    return da + dx_norm


# ---------------------------------------------------------------------------
# memory layer backwards

def _subkey_backward(dsums: np.ndarray, idx: np.ndarray, q: np.ndarray, pk,
                     grads: GradStore, prefix: str) -> np.ndarray:
    """Route selected-score gradients back to sub-keys and queries.

    dsums [s, H, k] are gradients of the selected additive pair scores;
    idx [s, H, k] their flat slot ids; q [s, d] the per-head query matrix.
    Returns dq [s, d].
    """
    s, heads, _ = dsums.shape
    n = pk.k_row.shape[1]
    d_p = pk.k_row.shape[2]
    d_h = 2 * d_p
    rows_sel = idx // n
    cols_sel = idx % n
    dq = np.zeros_like(q)
    dk_row = np.zeros_like(pk.k_row)
    dk_col = np.zeros_like(pk.k_col)
    take = np.arange(s)[:, None]
    for h in range(heads):
        ds_row = np.zeros((s, n), dtype=q.dtype)
        ds_col = np.zeros((s, n), dtype=q.dtype)
        np.add.at(ds_row, (take, rows_sel[:, h]), dsums[:, h])
        np.add.at(ds_col, (take, cols_sel[:, h]), dsums[:, h])
        q_h = q[:, h * d_h:(h + 1) * d_h]
        dq[:, h * d_h:h * d_h + d_p] = ds_row @ pk.k_row[h]
        dq[:, h * d_h + d_p:(h + 1) * d_h] = ds_col @ pk.k_col[h]
        dk_row[h] = ds_row.T @ q_h[:, :d_p]
        dk_col[h] = ds_col.T @ q_h[:, d_p:]
    grads.add(f"{prefix}.bank.pk.k_row", dk_row)
    grads.add(f"{prefix}.bank.pk.k_col", dk_col)
    return dq


def _query_pipeline_backward(dq: np.ndarray, mcache: dict, p: MemoryBlockParams,
                             grads: GradStore, prefix: str) -> np.ndarray:
    if mcache["ln"] is not None:
        dq, dg = rms_norm_backward(dq, mcache["ln"])
        grads.add(f"{prefix}.query_ln_gain", dg)
    if mcache["bn"] is not None:
        dq, dgamma, dbeta = batchnorm_backward(dq, mcache["bn"])
        grads.add(f"{prefix}.query_bn.gamma", dgamma)
        grads.add(f"{prefix}.query_bn.beta", dbeta)
    return dq


def _headwise_memory_backward(dm: np.ndarray, mcache: dict, p: MemoryBlockParams,
                              grads: GradStore, prefix: str,
                              counter: dict | None) -> np.ndarray:
    cfg = p.cfg
    bank = p.bank
    s = dm.shape[0]
    idx, w = mcache["idx"], mcache["w"]
    pooled = mcache["pooled"]  # [s, H, d_h]
    dmh = dm.reshape(s, cfg.heads, cfg.d_h)
    grads.add(f"{prefix}.bank.values.w_heads", np.einsum("shi,shj->hij", dmh, pooled))
    dpooled = np.einsum("shi,hij->shj", dmh, bank.values.w_heads)
    g_out = dpooled.reshape(s * cfg.heads, cfg.d_h)
    idx_f = idx.reshape(s * cfg.heads, cfg.k)
    w_f = w.reshape(s * cfg.heads, cfg.k)
    grads.add(f"{prefix}.bank.values.v_base",
              dedup_scatter_backward(g_out, idx_f, w_f, cfg.N, counter))
    dw = weight_grad_backward(g_out, idx_f, bank.values.v_base)
    dsums = softmax_backward(w, dw.reshape(s, cfg.heads, cfg.k))
    dq = _subkey_backward(dsums, idx, mcache["q"], bank.pk, grads, prefix)
    return _query_pipeline_backward(dq, mcache, p, grads, prefix)


def _fullwidth_memory_backward(dm: np.ndarray, mcache: dict, p: MemoryBlockParams,
                               grads: GradStore, prefix: str,
                               counter: dict | None) -> np.ndarray:
    """Shared path of the linear and pkm kinds: per-head pooling of full-width
    value rows summed over heads, then kind-specific scoring backward."""
    cfg = p.cfg
    bank = p.bank
    s, d = dm.shape
    idx, w = mcache["idx"], mcache["w"]
    heads, k = idx.shape[1], idx.shape[2]
    # every head pools the same upstream gradient: bag (token, head) -> dm[token]
    g_out = np.broadcast_to(dm[:, None, :], (s, heads, d)).reshape(s * heads, d)
    idx_f = idx.reshape(s * heads, k)
    w_f = w.reshape(s * heads, k)
    grads.add(f"{prefix}.bank.values",
              dedup_scatter_backward(g_out, idx_f, w_f, cfg.N, counter))
    dw = weight_grad_backward(g_out, idx_f, bank.values)
    dsums = softmax_backward(w, dw.reshape(s, heads, k))
    q = mcache["q"]
    if mcache["kind"] == "pkm":
        dq = _subkey_backward(dsums, idx, q, bank.pk, grads, prefix)
    else:
        d_h = d // heads
        dq = np.zeros_like(q)
        dkeys = np.zeros_like(bank.keys)
        take = np.arange(s)[:, None]
        for h in range(heads):
            ds = np.zeros((s, cfg.N), dtype=q.dtype)
            np.add.at(ds, (take, idx[:, h]), dsums[:, h])
            q_h = q[:, h * d_h:(h + 1) * d_h]
            dq[:, h * d_h:(h + 1) * d_h] = ds @ bank.keys[h]
            dkeys[h] = ds.T @ q_h
        grads.add(f"{prefix}.bank.keys", dkeys)
    dq = _query_pipeline_backward(dq, mcache, p, grads, prefix)
    da = dq @ bank.w_q.T
    grads.add(f"{prefix}.bank.w_q", mcache["a"].T @ dq)
    return da


def memory_block_backward(dy: np.ndarray, cache: dict, p: MemoryBlockParams,
                          grads: GradStore, prefix: str,
                          probe: dict | None = None,
                          counter: dict | None = None) -> np.ndarray:
    mcache = cache["mem"]
    if mcache["kind"] == "headwise":
        if mcache["pooled"] is None:
            raise ValueError("cached-value forward has no backward path")
        da = _headwise_memory_backward(dy, mcache, p, grads, prefix, counter)
    else:
        da = _fullwidth_memory_backward(dy, mcache, p, grads, prefix, counter)
    dxn = attention_backward(da, cache["attn"], p.attn, grads, f"{prefix}.attn", probe)
    dx_norm, dgain = rms_norm_backward(dxn, cache["norm"])
    grads.add(f"{prefix}.norm_gain", dgain)
    dx = dy + dx_norm
    if cache["residual"]:
        dx = dx + da
    return dx


# ---------------------------------------------------------------------------
# whole model

def model_backward(dlogits: np.ndarray, caches: dict, model: ModelSpec,
                   allowed: set[str] | None = None,
                   probes: dict | None = None,
                   counter: dict | None = None) -> GradStore:
    """Reverse pass over the whole stack; returns accumulated GradStore.

    allowed restricts which parameter paths accumulate (frozen groups get
    nothing). probes collects per-head attention outputs and gradients by
    block prefix. counter tallies value-table scatter statistics.
    """
    grads = GradStore(allowed)
    xf = caches["xf"]
    grads.add("unembed", xf.T @ dlogits)
    dxf = dlogits @ model.unembed.T
    dx, dg = rms_norm_backward(dxf, caches["final"])
    grads.add("final_gain", dg)
    for i in reversed(range(len(model.blocks))):
        block = model.blocks[i]
        cache = caches["blocks"][i]
        if isinstance(block, TransformerBlockParams):
            dx = transformer_block_backward(dx, cache, block, grads, f"blocks.{i}", probes)
        else:
            dx = memory_block_backward(dx, cache, block, grads, f"blocks.{i}", probes,
                                       counter)
    tokens = caches["tokens"]
    if allowed is None or "embed" in allowed:
        demb = np.zeros_like(model.embed)
        np.add.at(demb, tokens, dx)
        grads.add("embed", demb)
    return grads
