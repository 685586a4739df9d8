"""Binary checkpoints: JSON header + raw little-endian tensor payload.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, then every tensor's bytes back to back in header order. The header
carries the config snapshot, per-block structure descriptors, the tensor
table (name, shape, dtype), and a sha256 of the payload. Loading rebuilds
the model so that saved and reloaded forward passes agree bitwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct

import numpy as np

from .layers import (
    BatchNorm,
    HeadwiseBank,
    LinearMemoryBank,
    MemoryBlockParams,
    MemoryLayerKind,
    PkmBank,
)
from .memory import MemoryConfig, ProductKeyBank, ValueBank
from .model import ModelSpec, named_buffers, named_params
from .transformer import AttentionParams, FfnParams, TransformerBlockParams

MAGIC = b"HDMEMCK\x00"
FORMAT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64}


class CheckpointError(Exception):
    """Corrupt or incompatible checkpoint file."""


def _block_descriptor(block) -> dict:
    if isinstance(block, TransformerBlockParams):
        return {"type": "transformer", "rope_base": block.attn.rope_base}
    toggles = dataclasses.asdict(block.kind)
    cfg = block.cfg
    desc = {"type": "memory", "toggles": toggles, "route": block.route,
            "rope_base": block.attn.rope_base,
            "cfg": {"heads": cfg.heads, "n": cfg.n, "k": cfg.k, "d": cfg.d,
                    "fused_threshold": cfg.fused_threshold}}
    if block.query_bn is not None:
        desc["bn_momentum"] = block.query_bn.momentum
        desc["bn_eps"] = block.query_bn.eps
    return desc


def save_checkpoint(path: str, model: ModelSpec, config: dict | None = None):
    tensors = list(named_params(model)) + list(named_buffers(model))
    table = [{"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name}
             for name, arr in tensors]
    for entry in table:
        if entry["dtype"] not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {entry['dtype']}")
    payload = b"".join(np.ascontiguousarray(arr).astype(arr.dtype, copy=False)
                       .tobytes() for _, arr in tensors)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "model": {
            "vocab": model.vocab, "d": model.d, "heads": model.heads,
            "d_ff": model.d_ff, "base_depth": model.base_depth,
            "trainable": list(model.trainable),
            "blocks": [_block_descriptor(b) for b in model.blocks],
        },
        "tensors": table,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)


def _read_tensors(header: dict, payload: bytes) -> dict[str, np.ndarray]:
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch")
    out, offset = {}, 0
    for entry in header["tensors"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]]).newbyteorder("<")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointError(f"payload truncated at {entry['name']}")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=dtype)
        out[entry["name"]] = arr.reshape(shape).astype(dtype.base, copy=True)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def _take(tensors: dict, name: str) -> np.ndarray:
    try:
        return tensors.pop(name)
    except KeyError:
        raise CheckpointError(f"missing tensor {name}") from None


def _load_attention(tensors, prefix, heads, rope_base, with_projection):
    return AttentionParams(
        w_q=_take(tensors, f"{prefix}.w_q"), w_k=_take(tensors, f"{prefix}.w_k"),
        w_v=_take(tensors, f"{prefix}.w_v"),
        w_o=_take(tensors, f"{prefix}.w_o") if with_projection else None,
        heads=heads, rope_base=rope_base)


def _load_block(desc: dict, tensors: dict, prefix: str, heads: int):
    if desc["type"] == "transformer":
        attn = _load_attention(tensors, f"{prefix}.attn", heads,
                               desc["rope_base"], True)
        ffn = FfnParams(w_gate=_take(tensors, f"{prefix}.ffn.w_gate"),
                        w_up=_take(tensors, f"{prefix}.ffn.w_up"),
                        w_down=_take(tensors, f"{prefix}.ffn.w_down"))
        return TransformerBlockParams(
            attn=attn, ffn=ffn, attn_gain=_take(tensors, f"{prefix}.attn_gain"),
            ffn_gain=_take(tensors, f"{prefix}.ffn_gain"))
    if desc["type"] != "memory":
        raise CheckpointError(f"unknown block type {desc['type']!r}")
    lk = MemoryLayerKind(**desc["toggles"])
    cfg = MemoryConfig(**desc["cfg"])
    attn = _load_attention(tensors, f"{prefix}.attn", heads,
                           desc["rope_base"], lk.output_projection)
    if lk.kind == "linear":
        bank = LinearMemoryBank(w_q=_take(tensors, f"{prefix}.bank.w_q"),
                                keys=_take(tensors, f"{prefix}.bank.keys"),
                                values=_take(tensors, f"{prefix}.bank.values"))
    elif lk.kind == "pkm":
        pk = ProductKeyBank(k_row=_take(tensors, f"{prefix}.bank.pk.k_row"),
                            k_col=_take(tensors, f"{prefix}.bank.pk.k_col"))
        bank = PkmBank(w_q=_take(tensors, f"{prefix}.bank.w_q"), pk=pk,
                       values=_take(tensors, f"{prefix}.bank.values"))
    else:
        pk = ProductKeyBank(k_row=_take(tensors, f"{prefix}.bank.pk.k_row"),
                            k_col=_take(tensors, f"{prefix}.bank.pk.k_col"))
        values = ValueBank(v_base=_take(tensors, f"{prefix}.bank.values.v_base"),
                           w_heads=_take(tensors, f"{prefix}.bank.values.w_heads"))
        bank = HeadwiseBank(pk=pk, values=values)
    query_bn = None
    if lk.query_batchnorm:
        query_bn = BatchNorm(
            gamma=_take(tensors, f"{prefix}.query_bn.gamma"),
            beta=_take(tensors, f"{prefix}.query_bn.beta"),
            running_mean=_take(tensors, f"{prefix}.query_bn.running_mean"),
            running_var=_take(tensors, f"{prefix}.query_bn.running_var"),
            momentum=desc.get("bn_momentum", 0.1),
            eps=desc.get("bn_eps", 1e-5))
    query_ln_gain = (_take(tensors, f"{prefix}.query_ln_gain")
                     if lk.query_layernorm else None)
    return MemoryBlockParams(kind=lk, cfg=cfg, attn=attn,
                             norm_gain=_take(tensors, f"{prefix}.norm_gain"),
                             bank=bank, query_bn=query_bn,
                             query_ln_gain=query_ln_gain, route=desc["route"])


def load_checkpoint(path: str):
    """Returns (model, config snapshot or None)."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version, = struct.unpack_from("<I", blob, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    hlen, = struct.unpack_from("<Q", blob, 12)
    header_end = 20 + hlen
    if header_end > len(blob):
        raise CheckpointError("header truncated")
    try:
        header = json.loads(blob[20:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable header: {e}") from e
    tensors = _read_tensors(header, blob[header_end:])
    info = header["model"]
    blocks = [_load_block(desc, tensors, f"blocks.{i}", info["heads"])
              for i, desc in enumerate(info["blocks"])]
    model = ModelSpec(vocab=info["vocab"], d=info["d"], heads=info["heads"],
                      d_ff=info["d_ff"], base_depth=info["base_depth"],
                      embed=_take(tensors, "embed"),
                      unembed=_take(tensors, "unembed"),
                      final_gain=_take(tensors, "final_gain"),
                      blocks=blocks, trainable=list(info["trainable"]))
    if tensors:
        raise CheckpointError(f"unused tensors in file: {sorted(tensors)[:3]}")
    return model, header["config"]
