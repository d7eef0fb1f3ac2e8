"""One memory-augmented decoder block.

Layout inside a block::

    E_attn = E + Attn(RMSNorm(E))            causal, rotary, grouped KV heads
    E_skip = E_attn + g_out * E_mem(E, M)    memory read on the raw block input
    E_next = E_skip + FFN(RMSNorm(E_skip))   SwiGLU

The write to the bank is computed here but returned unapplied; the model
applies it once the whole segment has been processed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .memory import (
    MemoryBank, MemoryParams, MemoryReadResult, MemoryWrite, memory_read, propose_update,
)
from .numerics import (
    ConfigError, DimensionError, Tensor, concat, get_dtype, matmul, rms_norm, rope_apply,
    silu, softmax_rows,
)


@dataclass
class BlockParams:
    wq: Tensor            # (d, n_heads * d_head)
    wk: Tensor            # (d, n_kv_heads * d_head)
    wv: Tensor
    wo: Tensor            # (n_heads * d_head, d)
    w1: Tensor            # (d, d_ff) gate branch
    w3: Tensor            # (d, d_ff) linear branch
    w2: Tensor            # (d_ff, d)
    attn_norm: Tensor     # (d,)
    ffn_norm: Tensor      # (d,)
    n_heads: int
    n_kv_heads: int
    memory: MemoryParams | None = None
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(
                f"n_heads ({self.n_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})")
        if self.d_head % 2:
            raise ConfigError(f"head dimension {self.d_head} must be even for rotary embedding")

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.wq.shape[1] // self.n_heads

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, n_heads: int, n_kv_heads: int, d_ff: int,
             n_layers: int = 1, std: float = 0.02, dtype=None, prefix: str = "",
             **kwargs) -> "BlockParams":
        dtype = dtype or get_dtype()
        if d % n_heads:
            raise ConfigError(f"model dim {d} not divisible by n_heads {n_heads}")
        d_head = d // n_heads
        out_std = std / math.sqrt(2 * n_layers)

        def w(name, shape, s):
            return Tensor((rng.standard_normal(shape) * s).astype(dtype), requires_grad=True,
                          name=prefix + name, dtype=dtype)

        def ones(name):
            return Tensor(np.ones(d, dtype=dtype), requires_grad=True, name=prefix + name,
                          dtype=dtype)

        return cls(
            wq=w("attn.wq", (d, n_heads * d_head), std),
            wk=w("attn.wk", (d, n_kv_heads * d_head), std),
            wv=w("attn.wv", (d, n_kv_heads * d_head), std),
            wo=w("attn.wo", (n_heads * d_head, d), out_std),
            w1=w("ffn.w1", (d, d_ff), std),
            w3=w("ffn.w3", (d, d_ff), std),
            w2=w("ffn.w2", (d_ff, d), out_std),
            attn_norm=ones("attn_norm"),
            ffn_norm=ones("ffn_norm"),
            n_heads=n_heads, n_kv_heads=n_kv_heads, **kwargs,
        )

    def tensors(self) -> dict[str, Tensor]:
        out = {name: getattr(self, name) for name in
               ("wq", "wk", "wv", "wo", "w1", "w3", "w2", "attn_norm", "ffn_norm")}
        if self.memory is not None:
            out.update({f"memory.{k}": v for k, v in self.memory.tensors().items()})
        return out


@dataclass
class KVCache:
    """Rotated keys and values of every token seen so far, (B, n_kv, S, d_head)."""
    k: Tensor | None = None
    v: Tensor | None = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]

    def clone(self) -> "KVCache":
        if self.k is None:
            return KVCache()
        return KVCache(Tensor(self.k.data.copy(), dtype=self.k.dtype),
                       Tensor(self.v.data.copy(), dtype=self.v.dtype))


@dataclass
class BlockOutput:
    E_next: Tensor
    read: MemoryReadResult | None = None
    proposed_update: MemoryWrite | None = None
    extras: dict = field(default_factory=dict)


def _as_batch(E: Tensor) -> tuple[Tensor, bool]:
    if E.ndim == 2:
        return E.reshape(1, *E.shape), True
    if E.ndim == 3:
        return E, False
    raise DimensionError(f"expected (T, d) or (B, T, d), got {E.shape}")


def causal_self_attention(E: Tensor, params: BlockParams, pos_offset: int = 0,
                          kv_cache: KVCache | None = None) -> Tensor:
    """Pre-normalised causal multi-head attention with residual.

    ``pos_offset`` is the absolute position of the first row of ``E``. When a
    cache is given its keys/values are attended to and then extended in place.
    """
    E3, squeeze = _as_batch(E)
    B, T, d = E3.shape
    H, KV, hd = params.n_heads, params.n_kv_heads, params.d_head
    G = H // KV
    past = 0
    if kv_cache is not None and kv_cache.k is not None:
        past = kv_cache.length
        if kv_cache.k.shape[:2] != (B, KV) or kv_cache.k.shape[3] != hd:
            raise DimensionError(
                f"kv cache shape {kv_cache.k.shape} inconsistent with batch {B}, "
                f"{KV} kv heads of size {hd}")
        if past != pos_offset:
            raise DimensionError(f"kv cache holds {past} positions but pos_offset is {pos_offset}")

    h = rms_norm(E3, params.attn_norm, params.norm_eps)
    q = rope_apply(matmul(h, params.wq).reshape(B, T, H, hd), params.rope_base, pos_offset)
    k = rope_apply(matmul(h, params.wk).reshape(B, T, KV, hd), params.rope_base, pos_offset)
    v = matmul(h, params.wv).reshape(B, T, KV, hd)
    # head index = kv * G + g, so query heads sharing a kv head are contiguous
    q = q.reshape(B, T, KV, G, hd).transpose(0, 2, 3, 1, 4).reshape(B, KV, G * T, hd)
    k = k.transpose(0, 2, 1, 3)
    v = v.transpose(0, 2, 1, 3)
    if past:
        k = concat([kv_cache.k, k], axis=2)
        v = concat([kv_cache.v, v], axis=2)
    if kv_cache is not None:
        kv_cache.k, kv_cache.v = k, v
    S = past + T
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
    visible = np.arange(S)[None, :] <= (past + np.arange(T))[:, None]
    p = softmax_rows(scores, mask=np.tile(visible, (G, 1)))
    o = matmul(p, v).reshape(B, KV, G, T, hd).transpose(0, 3, 1, 2, 4).reshape(B, T, H * hd)
    out = E3 + matmul(o, params.wo)
    return out.reshape(T, d) if squeeze else out


def swiglu_ffn(x: Tensor, params: BlockParams) -> Tensor:
    h = rms_norm(x, params.ffn_norm, params.norm_eps)
    return x + matmul(silu(matmul(h, params.w1)) * matmul(h, params.w3), params.w2)


def block_forward(E: Tensor, bank: MemoryBank | None, params: BlockParams,
                  memory_enabled: bool = True, pos_offset: int = 0,
                  kv_cache: KVCache | None = None, top_k: int | None = None,
                  aggregation: str = "attention") -> BlockOutput:
    E_attn = causal_self_attention(E, params, pos_offset, kv_cache)
    if not memory_enabled:
        return BlockOutput(swiglu_ffn(E_attn, params))
    if params.memory is None or bank is None:
        raise ConfigError("memory_enabled block needs memory parameters and a bank")
    read = memory_read(E, bank, params.memory, top_k=top_k)
    update = propose_update(E, read, params.memory, aggregation)
    E_next = swiglu_ffn(E_attn + read.E_gated, params)
    return BlockOutput(E_next, read, update)
