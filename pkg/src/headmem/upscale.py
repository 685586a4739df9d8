"""Depth up-scaling: where inserted blocks go and how they are initialized.

Placement policies name positions in the EXPANDED stack (base depth L plus K
inserted blocks, indices 0..L+K-1):

  top_heavy     one insert before each of the last K base blocks
  bottom_heavy  one insert before each of the first K base blocks
  distributed   inserts spread evenly, anchored before every ceil(L/K)-th block
  llama_pro     duplicated-block convention: the insert FOLLOWS its source,
                with sources spread evenly

For the reference shapes (L=16, K=8) and (L=32, K=16) these reproduce the
known index sets exactly; other shapes use the even-spacing generalization
documented on policy_indices (anchor_t = floor((t+1) * L / K) - 1), which is
this library's own extension.

Two builders share the policies. build_dus inserts parameter copies of
adjacent base blocks (optionally zero-initialized so each copy starts as an
identity map). build_memory_dus inserts memory blocks whose attention is
copied from the subsequent base block and whose value tables start at zero,
so the expanded model's function is exactly the base model's at init.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    HeadwiseBank,
    LinearMemoryBank,
    MemoryBlockParams,
    MemoryLayerKind,
    PkmBank,
    init_batchnorm,
    init_headwise_bank,
    init_linear_bank,
    init_pkm_bank,
)
from .memory import MemoryConfig
from .model import ModelSpec
from .numerics import make_rng, ones
from .transformer import AttentionParams, FfnParams, TransformerBlockParams

POLICY_NAMES = ("top_heavy", "distributed", "bottom_heavy", "llama_pro")
INIT_SOURCES = ("preceding", "subsequent", "average_adjacent")
INSERT_KINDS = ("transformer_copy", "memory_block")


@dataclass(frozen=True)
class PlacementPolicy:
    name: str
    base_depth: int  # L
    inserted: int  # K

    def __post_init__(self):
        if self.name not in POLICY_NAMES:
            raise ValueError(f"unknown policy {self.name!r}, expected {POLICY_NAMES}")
        if self.base_depth < 1:
            raise ValueError("base depth must be >= 1")
        if not 0 <= self.inserted <= self.base_depth:
            raise ValueError(
                f"inserted count {self.inserted} must lie in [0, {self.base_depth}]")


def _even_anchors(depth: int, count: int) -> list[int]:
    # floor((t+1) * L / K) - 1: evenly spaced base indices, last one = L - 1
    return [(t + 1) * depth // count - 1 for t in range(count)]


def policy_indices(policy: PlacementPolicy) -> list[int]:
    """Expanded-stack positions of the K inserted blocks, strictly increasing.

    top_heavy/bottom_heavy insert before each of the last/first K base
    blocks; distributed inserts before evenly spaced anchors; llama_pro
    inserts after evenly spaced sources. Positions account for earlier
    inserts (insert t shifts by t).
    """
    depth, count = policy.base_depth, policy.inserted
    if count == 0:
        return []
    if policy.name == "top_heavy":
        positions = [depth - count + 2 * t for t in range(count)]
    elif policy.name == "bottom_heavy":
        positions = [2 * t for t in range(count)]
    elif policy.name == "distributed":
        positions = [a + t for t, a in enumerate(_even_anchors(depth, count))]
    else:  # llama_pro
        positions = [a + t + 1 for t, a in enumerate(_even_anchors(depth, count))]
    assert len(positions) == count
    assert all(0 <= p < depth + count for p in positions)
    assert all(b > a for a, b in zip(positions, positions[1:]))
    return positions


def neighbor_base_indices(policy: PlacementPolicy) -> list[tuple[int | None, int | None]]:
    """(preceding, subsequent) base-block index for each insert, None at the edges."""
    depth = policy.base_depth
    out = []
    for t, p in enumerate(policy_indices(policy)):
        sub = p - t  # base blocks seen before position p
        pre = sub - 1
        out.append((pre if pre >= 0 else None, sub if sub < depth else None))
    return out


@dataclass
class UpscalePlan:
    policy: PlacementPolicy
    insert_kind: str  # transformer_copy | memory_block
    init_source: str = "subsequent"  # preceding | subsequent | average_adjacent
    memory_kind: MemoryLayerKind | None = None
    memory_cfg: MemoryConfig | None = None
    zero_init_copies: bool = False  # transformer_copy only
    seed: int = 0  # bank initialization stream

    def __post_init__(self):
        if self.insert_kind not in INSERT_KINDS:
            raise ValueError(f"unknown insert kind {self.insert_kind!r}")
        if self.init_source not in INIT_SOURCES:
            raise ValueError(f"unknown init source {self.init_source!r}")
        if self.insert_kind == "memory_block":
            if self.memory_kind is None or self.memory_cfg is None:
                raise ValueError("memory_block plans need memory_kind and memory_cfg")
            if self.init_source != "subsequent":
                raise ValueError("memory blocks copy the subsequent block's attention")


# ---------------------------------------------------------------------------
# parameter copies

def copy_attention(p: AttentionParams, keep_projection: bool = True) -> AttentionParams:
    return AttentionParams(
        w_q=p.w_q.copy(), w_k=p.w_k.copy(), w_v=p.w_v.copy(),
        w_o=p.w_o.copy() if (keep_projection and p.w_o is not None) else None,
        heads=p.heads, rope_base=p.rope_base,
    )


def copy_transformer_block(b: TransformerBlockParams) -> TransformerBlockParams:
    return TransformerBlockParams(
        attn=copy_attention(b.attn),
        ffn=FfnParams(w_gate=b.ffn.w_gate.copy(), w_up=b.ffn.w_up.copy(),
                      w_down=b.ffn.w_down.copy()),
        attn_gain=b.attn_gain.copy(),
        ffn_gain=b.ffn_gain.copy(),
    )


def average_transformer_blocks(a: TransformerBlockParams,
                               b: TransformerBlockParams) -> TransformerBlockParams:
    avg = lambda u, v: (u + v) / 2
    return TransformerBlockParams(
        attn=AttentionParams(
            w_q=avg(a.attn.w_q, b.attn.w_q), w_k=avg(a.attn.w_k, b.attn.w_k),
            w_v=avg(a.attn.w_v, b.attn.w_v), w_o=avg(a.attn.w_o, b.attn.w_o),
            heads=a.attn.heads, rope_base=a.attn.rope_base,
        ),
        ffn=FfnParams(w_gate=avg(a.ffn.w_gate, b.ffn.w_gate),
                      w_up=avg(a.ffn.w_up, b.ffn.w_up),
                      w_down=avg(a.ffn.w_down, b.ffn.w_down)),
        attn_gain=avg(a.attn_gain, b.attn_gain),
        ffn_gain=avg(a.ffn_gain, b.ffn_gain),
    )


def zero_init_dus_copy(block: TransformerBlockParams) -> TransformerBlockParams:
    """Copy with W_o and W_down zeroed: both sublayers then add exactly zero,
    so the copied block computes the identity map."""
    out = copy_transformer_block(block)
    out.attn.w_o[...] = 0.0
    out.ffn.w_down[...] = 0.0
    return out


def _copy_model_shell(base: ModelSpec) -> ModelSpec:
    return ModelSpec(
        vocab=base.vocab, d=base.d, heads=base.heads, d_ff=base.d_ff,
        base_depth=base.base_depth,
        embed=base.embed.copy(), unembed=base.unembed.copy(),
        final_gain=base.final_gain.copy(),
        blocks=[], trainable=[],
    )


def _assemble(base: ModelSpec, positions: list[int], inserted: list) -> ModelSpec:
    at = dict(zip(positions, inserted))
    out = _copy_model_shell(base)
    base_iter = iter(base.blocks)
    for q in range(len(base.blocks) + len(inserted)):
        if q in at:
            out.blocks.append(at[q])
            out.trainable.append(True)
        else:
            out.blocks.append(copy_transformer_block(next(base_iter)))
            out.trainable.append(False)
    return out


def build_dus(base: ModelSpec, plan: UpscalePlan) -> ModelSpec:
    """Expand by inserting transformer-block copies; only copies trainable."""
    if plan.insert_kind != "transformer_copy":
        raise ValueError("build_dus expects a transformer_copy plan")
    if any(not isinstance(b, TransformerBlockParams) for b in base.blocks):
        raise ValueError("base model must be a plain transformer stack")
    positions = policy_indices(plan.policy)
    neighbors = neighbor_base_indices(plan.policy)
    inserted = []
    for (pre, sub) in neighbors:
        if plan.init_source == "preceding":
            if pre is None:
                raise ValueError("insert at stack start has no preceding block to copy")
            blk = copy_transformer_block(base.blocks[pre])
        elif plan.init_source == "subsequent":
            if sub is None:
                raise ValueError("insert at stack end has no subsequent block to copy")
            blk = copy_transformer_block(base.blocks[sub])
        else:
            if pre is None or sub is None:
                raise ValueError("average_adjacent needs both neighbors")
            blk = average_transformer_blocks(base.blocks[pre], base.blocks[sub])
        if plan.zero_init_copies:
            blk = zero_init_dus_copy(blk)
        inserted.append(blk)
    return _assemble(base, positions, inserted)


def _init_memory_block(source: TransformerBlockParams, kind: MemoryLayerKind,
                       cfg: MemoryConfig, rng) -> MemoryBlockParams:
    # The block sees the same normalized context as its source block's
    # attention: gain and attention weights are copied together. The output
    # projection travels only when the variant consumes projected outputs.
    attn = copy_attention(source.attn, keep_projection=kind.output_projection)
    if kind.kind == "linear":
        bank = init_linear_bank(cfg, rng)
    elif kind.kind == "pkm":
        bank = init_pkm_bank(cfg, rng)
    else:
        bank = init_headwise_bank(cfg, rng)
    return MemoryBlockParams(
        kind=kind, cfg=cfg, attn=attn, norm_gain=source.attn_gain.copy(), bank=bank,
        query_bn=init_batchnorm(cfg.d) if kind.query_batchnorm else None,
        query_ln_gain=ones(cfg.d) if kind.query_layernorm else None,
    )


def build_memory_dus(base: ModelSpec, plan: UpscalePlan) -> ModelSpec:
    """Expand by inserting memory blocks; the expanded model is the base
    model's exact function at init (zero value tables).

    Each memory block copies the attention of the subsequent base block. A
    llama_pro-placed tail insert has no subsequent block and copies the
    preceding one instead.
    """
    if plan.insert_kind != "memory_block":
        raise ValueError("build_memory_dus expects a memory_block plan")
    if any(not isinstance(b, TransformerBlockParams) for b in base.blocks):
        raise ValueError("base model must be a plain transformer stack")
    cfg = plan.memory_cfg
    if cfg.d != base.d or cfg.heads != base.heads:
        raise ValueError(
            f"memory config ({cfg.d}, {cfg.heads} heads) does not match the base "
            f"model ({base.d}, {base.heads} heads)")
    rng = make_rng(plan.seed)
    positions = policy_indices(plan.policy)
    neighbors = neighbor_base_indices(plan.policy)
    inserted = []
    for (pre, sub) in neighbors:
        src = base.blocks[sub] if sub is not None else base.blocks[pre]
        inserted.append(_init_memory_block(src, plan.memory_kind, cfg, rng))
    return _assemble(base, positions, inserted)
