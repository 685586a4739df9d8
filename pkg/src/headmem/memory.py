"""Product-key retrieval core.

Each attention head owns two small sub-key banks of n keys. A head query of
width d_h splits into a row half and a column half (d_p = d_h / 2 each); the
additive pair score sigma(i, j) = S_row[i] + S_col[j] ranges over an n x n
grid of N = n^2 composite slots addressed by the flat id i * n + j.

Two selection routes return identical results:
  * two_stage_topk: top-k per axis, then top-k over the k^2 candidate sums
    (exact, because any globally top-k pair has both coordinates inside the
    per-axis top-k sets, ties included under the shared tie-break rule);
  * fused_cartesian_topk: materialize the full additive grid and take a
    single top-k (cheaper for short token counts, identical output).

Values live in one shared table of d_h-wide rows plus a small per-head
transform, so H heads cost N * d_h + H * d_h^2 parameters instead of
H * N * d_h. A per-head cache of pre-transformed rows makes inference a pure
gather without changing the math.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .numerics import gaussian, softmax, topk, zeros


@dataclass(frozen=True)
class MemoryConfig:
    """Retrieval hyperparameters; derived sizes are properties.

    heads: attention heads H (each head addresses its own key banks)
    n: sub-keys per axis, giving N = n^2 composite slots per head
    k: retrieved slots per token per head
    d: model width; the per-head value width is d_h = d / heads
    fused_threshold: token counts at or below this dispatch to the fused path
    """

    heads: int
    n: int
    k: int
    d: int
    fused_threshold: int = 16

    def __post_init__(self):
        if self.heads < 1 or self.n < 1 or self.d < 1:
            raise ValueError("heads, n and d must be positive")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if (self.d // self.heads) % 2 != 0:
            raise ValueError("per-head width d/heads must be even to split row/col")
        if not 1 <= self.k <= self.n:
            raise ValueError(f"k={self.k} must satisfy 1 <= k <= n={self.n}")
        if self.fused_threshold < 0:
            raise ValueError("fused_threshold must be >= 0")

    @property
    def N(self) -> int:
        return self.n * self.n

    @property
    def d_h(self) -> int:
        return self.d // self.heads

    @property
    def d_p(self) -> int:
        return self.d_h // 2


@dataclass
class ProductKeyBank:
    k_row: np.ndarray  # [H, n, d_p]
    k_col: np.ndarray  # [H, n, d_p]


@dataclass
class ValueBank:
    """Shared slot table plus per-head output transforms.

    v_base rows are zero at model init so a fresh memory layer contributes
    exactly nothing; w_heads mixes each head's pooled row into its slice.
    """

    v_base: np.ndarray  # [N, d_h]
    w_heads: np.ndarray  # [H, d_h, d_h]


@dataclass
class ValueCache:
    """Per-head pre-transformed value rows: v_cached[h] = v_base @ w_heads[h].T"""

    v_cached: np.ndarray  # [H, N, d_h]


@dataclass
class RetrievalResult:
    indices: np.ndarray  # [s, H, k] int64 flat slot ids
    weights: np.ndarray  # [s, H, k], each (token, head) row sums to 1


def init_product_keys(cfg: MemoryConfig, rng: np.random.Generator) -> ProductKeyBank:
    std = 1.0 / np.sqrt(cfg.d_p)
    return ProductKeyBank(
        k_row=gaussian(rng, (cfg.heads, cfg.n, cfg.d_p), std),
        k_col=gaussian(rng, (cfg.heads, cfg.n, cfg.d_p), std),
    )


def init_value_bank(cfg: MemoryConfig, rng: np.random.Generator) -> ValueBank:
    # v_base stays zero: retrieval output is identically zero until training
    # writes into the table, which is what makes fresh blocks identity maps.
    return ValueBank(
        v_base=zeros((cfg.N, cfg.d_h)),
        w_heads=gaussian(rng, (cfg.heads, cfg.d_h, cfg.d_h), 1.0 / np.sqrt(cfg.d_h)),
    )


def flat_index(i, j, n: int):
    """Composite slot id of sub-key pair (i, j): i * n + j, both 0-based."""
    i = np.asarray(i)
    j = np.asarray(j)
    if np.any(i < 0) or np.any(i >= n) or np.any(j < 0) or np.any(j >= n):
        raise ValueError(f"pair index out of range for n={n}")
    return i * n + j


def unflatten_index(idx, n: int):
    idx = np.asarray(idx)
    if np.any(idx < 0) or np.any(idx >= n * n):
        raise ValueError(f"flat index out of range for n={n}")
    return idx // n, idx % n


# ---------------------------------------------------------------------------
# scoring-cost instrumentation

class MacCounter:
    """Multiply-accumulate tally for key-scoring matmuls."""

    def __init__(self):
        self.total = 0

    def add(self, macs: int) -> None:
        self.total += macs


_active_counter: MacCounter | None = None


@contextlib.contextmanager
def count_scoring_macs():
    """Collect the exact MAC count of every key scoring executed inside."""
    global _active_counter
    counter = MacCounter()
    before = _active_counter
    _active_counter = counter
    try:
        yield counter
    finally:
        _active_counter = before


def record_scoring_macs(macs: int) -> None:
    if _active_counter is not None:
        _active_counter.add(macs)


# ---------------------------------------------------------------------------
# scoring and selection

def score_subkeys(q_h: np.ndarray, bank: ProductKeyBank, head: int):
    """Axis scores for one head: q_h [s, d_h] -> (S_row [s, n], S_col [s, n])."""
    d_h = q_h.shape[-1]
    d_p = d_h // 2
    q_row, q_col = q_h[:, :d_p], q_h[:, d_p:]
    s_row = q_row @ bank.k_row[head].T
    s_col = q_col @ bank.k_col[head].T
    n = bank.k_row.shape[1]
    record_scoring_macs(2 * q_h.shape[0] * n * d_p)
    return s_row, s_col


def two_stage_topk(s_row: np.ndarray, s_col: np.ndarray, k: int):
    """Exact top-k over all n^2 additive pair scores via per-axis pre-selection.

    Returns (flat ids [s, k], softmax weights [s, k]). Candidates are the
    Cartesian product of the per-axis top-k sets; sorting candidates by flat
    id before the stable final top-k gives the same tie-break (descending
    score, ascending flat id) as scanning the whole grid.
    """
    s, n = s_row.shape
    if s_col.shape != (s, n):
        raise ValueError(f"axis score shapes differ: {s_row.shape} vs {s_col.shape}")
    if k > n:
        raise ValueError(f"two-stage selection needs k <= n, got k={k}, n={n}")
    ri, rv = topk(s_row, k)  # [s, k]
    ci, cv = topk(s_col, k)
    sums = (rv[:, :, None] + cv[:, None, :]).reshape(s, k * k)
    flat = (ri[:, :, None] * n + ci[:, None, :]).reshape(s, k * k)
    order = np.argsort(flat, axis=-1)  # candidate ids are distinct per token
    sums = np.take_along_axis(sums, order, axis=-1)
    flat = np.take_along_axis(flat, order, axis=-1)
    pos, vals = topk(sums, k)
    idx = np.take_along_axis(flat, pos, axis=-1)
    return idx, softmax(vals, axis=-1)


def fused_cartesian_topk(s_row: np.ndarray, s_col: np.ndarray, k: int):
    """Single top-k over the materialized n x n additive grid.

    Same selected set, same order, same weights as two_stage_topk (flat ids
    of the grid are already ascending, so the stable sort shares its
    tie-break). Intended for short token counts where one wide scan beats
    two narrow ones.
    """
    s, n = s_row.shape
    if s_col.shape != (s, n):
        raise ValueError(f"axis score shapes differ: {s_row.shape} vs {s_col.shape}")
    if k > n * n:
        raise ValueError(f"k={k} exceeds slot count {n * n}")
    grid = (s_row[:, :, None] + s_col[:, None, :]).reshape(s, n * n)
    idx, vals = topk(grid, k)
    return idx, softmax(vals, axis=-1)


def select_topk(s_row: np.ndarray, s_col: np.ndarray, k: int, fused_threshold: int,
                route: str = "auto"):
    """Dispatch between the two equivalent selection routes.

    route 'auto': fused when the token count is at or below fused_threshold
    (or when k > n, which the two-stage route cannot serve); two-stage
    otherwise. 'two_stage' and 'fused' force a route.
    """
    s, n = s_row.shape
    if route == "two_stage":
        return two_stage_topk(s_row, s_col, k)
    if route == "fused":
        return fused_cartesian_topk(s_row, s_col, k)
    if route != "auto":
        raise ValueError(f"unknown selection route {route!r}")
    if k > n or s <= fused_threshold:
        return fused_cartesian_topk(s_row, s_col, k)
    return two_stage_topk(s_row, s_col, k)


# ---------------------------------------------------------------------------
# value aggregation

def aggregate_values(result: RetrievalResult, bank: ValueBank) -> np.ndarray:
    """Weighted slot pooling then per-head transform, heads concatenated.

    For token r and head h: pooled = sum_k weights * v_base[idx]; the output
    slice is w_heads[h] @ pooled. Returns [s, H * d_h].
    """
    s, heads, _ = result.indices.shape
    rows = bank.v_base[result.indices]  # [s, H, k, d_h]
    pooled = np.einsum("shk,shkd->shd", result.weights, rows)
    out = np.einsum("hij,shj->shi", bank.w_heads, pooled)
    return out.reshape(s, heads * bank.v_base.shape[1])


def build_value_cache(bank: ValueBank) -> ValueCache:
    """Pre-apply each head transform to the whole table (inference path)."""
    # [H, N, d_h] = v_base [N, d_h] @ w_heads[h].T, stacked over heads
    return ValueCache(v_cached=np.einsum("nd,hed->hne", bank.v_base, bank.w_heads))


def aggregate_values_cached(result: RetrievalResult, cache: ValueCache) -> np.ndarray:
    """Gather-and-pool over cached rows; same map as aggregate_values."""
    s, heads, _ = result.indices.shape
    d_h = cache.v_cached.shape[-1]
    out = np.empty((s, heads, d_h), dtype=cache.v_cached.dtype)
    for h in range(heads):
        rows = cache.v_cached[h][result.indices[:, h]]  # [s, k, d_h]
        out[:, h] = np.einsum("sk,skd->sd", result.weights[:, h], rows)
    return out.reshape(s, heads * d_h)


# ---------------------------------------------------------------------------
# accounting

PARAM_SCHEMES = ("naive_headwise", "factorized", "flat_keys", "product_keys")


def param_count(cfg: MemoryConfig, scheme: str) -> int:
    """Exact parameter counts for value and key storage schemes.

    naive_headwise: one private d_h-wide table per head, H * N * d_h
    factorized: shared table + per-head transforms, N * d_h + H * d_h^2
    flat_keys: one full-width key per slot per head, H * N * (2 * d_p)
    product_keys: 2n sub-keys of width d_p per head, H * 2 * n * d_p
    """
    if scheme == "naive_headwise":
        return cfg.heads * cfg.N * cfg.d_h
    if scheme == "factorized":
        return cfg.N * cfg.d_h + cfg.heads * cfg.d_h * cfg.d_h
    if scheme == "flat_keys":
        return cfg.heads * cfg.N * 2 * cfg.d_p
    if scheme == "product_keys":
        return cfg.heads * 2 * cfg.n * cfg.d_p
    raise ValueError(f"unknown scheme {scheme!r}, expected one of {PARAM_SCHEMES}")


def slot_count(cfg: MemoryConfig, blocks: int) -> int:
    """Total addressable slots across heads and memory blocks: H * N * blocks."""
    if blocks < 0:
        raise ValueError("blocks must be >= 0")
    return cfg.heads * cfg.N * blocks


def lookup_cost(cfg: MemoryConfig, scheme: str) -> int:
    """Exact key-scoring multiply-accumulates per token per head.

    flat: N dot products of width 2 * d_p. product: 2n dot products of width
    d_p, an n-fold (sqrt(N)) reduction. Matches the instrumented counter.
    """
    if scheme == "flat":
        return cfg.N * 2 * cfg.d_p
    if scheme == "product":
        return 2 * cfg.n * cfg.d_p
    raise ValueError(f"unknown scheme {scheme!r}, expected 'flat' or 'product'")
