"""Decoder stack with memory in the first k blocks and the segment protocol.

Within a segment every memory block reads the bank as it stood when the
segment began; the writes the blocks propose are applied only after the last
block has run. Reads therefore never see content derived from the tokens
they are computing logits for.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .decoder import BlockParams, KVCache, block_forward
from .memory import MemoryBank, MemoryParams, apply_update, init_bank
from .numerics import (
    ConfigError, DimensionError, Tensor, concat, cross_entropy, embedding, matmul, precision, rms_norm,
)

BANK_MODES = ("shared_threaded", "per_block")
AGGREGATIONS = ("attention", "mean")


@dataclass
class ModelConfig:
    vocab_size: int = 512
    d: int = 64
    L: int = 4
    k_memory_blocks: int = 4
    N: int = 64
    n_heads: int = 4
    n_kv_heads: int = 1
    d_ff: int = 256
    rope_base: float = 10000.0
    top_k: int | None = None
    segment_len: int = 64
    bank_mode: str = "shared_threaded"
    gate_bias_init: float = -4.0
    precision: int = 32
    seed: int = 0
    memory_enabled: bool = True
    tie_embeddings: bool = False
    write_aggregation: str = "attention"
    init_std: float = 0.02
    norm_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"{name}: {why}")

        if self.vocab_size < 2:
            bad("vocab_size", "must be >= 2")
        for name in ("d", "L", "N", "n_heads", "n_kv_heads", "d_ff"):
            if getattr(self, name) < 1:
                bad(name, "must be positive")
        if not 1 <= self.k_memory_blocks <= self.L:
            bad("k_memory_blocks", f"must be in [1, L={self.L}]")
        if self.segment_len < 1:
            bad("segment_len", "must be >= 1")
        if self.d % self.n_heads:
            bad("n_heads", f"must divide d={self.d}")
        if self.n_heads % self.n_kv_heads:
            bad("n_kv_heads", f"must divide n_heads={self.n_heads}")
        if (self.d // self.n_heads) % 2:
            bad("n_heads", "head dimension d/n_heads must be even")
        if self.top_k is not None and not 1 <= self.top_k <= self.N:
            bad("top_k", f"must be in [1, N={self.N}]")
        if self.bank_mode not in BANK_MODES:
            bad("bank_mode", f"must be one of {BANK_MODES}")
        if self.write_aggregation not in AGGREGATIONS:
            bad("write_aggregation", f"must be one of {AGGREGATIONS}")
        if self.precision not in (32, 64):
            bad("precision", "must be 32 or 64")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown model config key")
        return cls(**data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class SequenceState:
    """Per-sequence state that persists across forward passes."""
    banks: list[MemoryBank]
    caches: list[KVCache]
    cursor: int = 0
    batch: int = 1

    def clone(self) -> "SequenceState":
        return SequenceState([b.detached() for b in self.banks],
                             [c.clone() for c in self.caches], self.cursor, self.batch)

    def detach(self) -> None:
        """Cut banks and caches from any tape (truncates backprop)."""
        self.banks = [b.detached() for b in self.banks]
        self.caches = [c.clone() for c in self.caches]


class LM2:
    """Embedding, L decoder blocks, final norm and LM head.

    ``with_memory=False`` builds the plain stack with no memory parameters at
    all. Core weights come from one seeded stream and memory weights from
    another, so a plain stack and a memory model with the same seed share
    every core weight.
    """

    def __init__(self, config: ModelConfig, with_memory: bool = True):
        self.config = config
        self.with_memory = with_memory
        cfg = config
        core_seq, mem_seq = np.random.SeedSequence(cfg.seed).spawn(2)
        core_rng, mem_rng = np.random.default_rng(core_seq), np.random.default_rng(mem_seq)
        with precision(cfg.precision):
            dtype = np.float32 if cfg.precision == 32 else np.float64
            self.embed = Tensor((core_rng.standard_normal((cfg.vocab_size, cfg.d))
                                 * cfg.init_std).astype(dtype),
                                requires_grad=True, name="embed", dtype=dtype)
            self.blocks = [
                BlockParams.init(core_rng, cfg.d, cfg.n_heads, cfg.n_kv_heads, cfg.d_ff,
                                 n_layers=cfg.L, std=cfg.init_std, dtype=dtype,
                                 prefix=f"blocks.{i}.", rope_base=cfg.rope_base,
                                 norm_eps=cfg.norm_eps)
                for i in range(cfg.L)
            ]
            self.final_norm = Tensor(np.ones(cfg.d, dtype=dtype), requires_grad=True,
                                     name="final_norm", dtype=dtype)
            self.head = None
            if not cfg.tie_embeddings:
                self.head = Tensor((core_rng.standard_normal((cfg.d, cfg.vocab_size))
                                    * cfg.init_std).astype(dtype),
                                   requires_grad=True, name="head", dtype=dtype)
            if with_memory:
                for i in range(cfg.k_memory_blocks):
                    self.blocks[i].memory = MemoryParams.init(
                        mem_rng, cfg.d, gate_bias=cfg.gate_bias_init, dtype=dtype,
                        prefix=f"blocks.{i}.memory.")
        self.dtype = dtype

    # parameters --------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        params = {"embed": self.embed}
        for i, blk in enumerate(self.blocks):
            params.update({f"blocks.{i}.{k}": v for k, v in blk.tensors().items()})
        params["final_norm"] = self.final_norm
        if self.head is not None:
            params["head"] = self.head
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def memory_block_indices(self) -> list[int]:
        if not (self.with_memory and self.config.memory_enabled):
            return []
        return [i for i, b in enumerate(self.blocks) if b.memory is not None]

    def memory_disabled(self) -> "LM2":
        """Same weights (shared), memory path switched off by config flag."""
        twin = copy.copy(self)
        twin.config = self.config.replace(memory_enabled=False)
        return twin

    def vanilla_twin(self) -> "LM2":
        """A plain stack that shares (by reference) every core weight of this model."""
        twin = copy.copy(self)
        twin.with_memory = False
        twin.blocks = [dataclasses.replace(b, memory=None) for b in self.blocks]
        return twin

    # state ---------------------------------------------------------------
    def new_state(self, batch: int = 1) -> SequenceState:
        cfg = self.config
        n_banks = 0
        if self.with_memory:
            n_banks = 1 if cfg.bank_mode == "shared_threaded" else cfg.k_memory_blocks
        banks = [init_bank(cfg.N, cfg.d, batch=batch, dtype=self.dtype) for _ in range(n_banks)]
        return SequenceState(banks, [KVCache() for _ in range(cfg.L)], 0, batch)

    def bank_for(self, state: SequenceState, block: int) -> MemoryBank | None:
        if not state.banks:
            return None
        return state.banks[0] if self.config.bank_mode == "shared_threaded" else state.banks[block]

    # forward -------------------------------------------------------------
    def forward_segment(self, state: SequenceState, tokens, capture: dict | None = None) -> Tensor:
        """Run one segment (T <= segment_len) and advance ``state``.

        ``tokens`` is (T,) or (B, T). Returns logits shaped like the tokens
        plus a vocabulary axis. If ``capture`` is a dict, each memory block's
        read result is stored under its block index.
        """
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise DimensionError(f"tokens must be (T,) or (B, T) with T >= 1, got {ids.shape}")
        B, T = ids.shape
        if T > cfg.segment_len:
            raise DimensionError(f"segment of {T} tokens exceeds segment_len={cfg.segment_len}")
        if B != state.batch:
            raise DimensionError(f"state holds {state.batch} sequences, got batch of {B}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            bad = int(ids.max()) if ids.max() >= cfg.vocab_size else int(ids.min())
            raise DimensionError(f"token id {bad} outside vocabulary of size {cfg.vocab_size}")

        mem_blocks = set(self.memory_block_indices())
        x = embedding(self.embed, ids)
        writes = []
        for i, blk in enumerate(self.blocks):
            use_mem = i in mem_blocks
            out = block_forward(x, self.bank_for(state, i) if use_mem else None, blk,
                                memory_enabled=use_mem, pos_offset=state.cursor,
                                kv_cache=state.caches[i], top_k=cfg.top_k,
                                aggregation=cfg.write_aggregation)
            x = out.E_next
            if use_mem:
                writes.append((i, out.proposed_update))
                if capture is not None:
                    capture[i] = out.read
        if cfg.bank_mode == "shared_threaded":
            for _, w in writes:
                state.banks[0] = apply_update(state.banks[0], w)
        else:
            for i, w in writes:
                state.banks[i] = apply_update(state.banks[i], w)
        state.cursor += T

        h = rms_norm(x, self.final_norm, cfg.norm_eps)
        head = self.head if self.head is not None else self.embed.swapaxes(0, 1)
        logits = matmul(h, head)
        return logits.reshape(T, cfg.vocab_size) if squeeze else logits

    def forward(self, tokens, state: SequenceState | None = None) -> Tensor:
        """Whole sequence, chopped into consecutive segments of ``segment_len``."""
        ids = np.asarray(tokens, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        if state is None:
            state = self.new_state(ids.shape[0])
        S = self.config.segment_len
        chunks = [self.forward_segment(state, ids[:, s:s + S]) for s in range(0, ids.shape[1], S)]
        logits = chunks[0] if len(chunks) == 1 else concat(chunks, axis=1)
        return logits.reshape(*logits.shape[1:]) if squeeze else logits


def analytic_param_count(cfg: ModelConfig, with_memory: bool = True) -> int:
    d, L, V = cfg.d, cfg.L, cfg.vocab_size
    hd = d // cfg.n_heads
    attention = d * cfg.n_heads * hd * 2 + d * cfg.n_kv_heads * hd * 2
    ffn = 3 * d * cfg.d_ff
    norms = 2 * d
    memory = cfg.k_memory_blocks * (6 * d * d + d) if with_memory else 0
    head = d + (0 if cfg.tie_embeddings else d * V)
    return V * d + L * (attention + ffn + norms) + memory + head


def lm_loss(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean (optionally weighted) next-token cross-entropy."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(
            f"lm_loss: {targets.shape} targets for logits of shape {logits.shape}")
    return cross_entropy(logits, targets, weights)


def perplexity(loss) -> float:
    value = loss.item() if isinstance(loss, Tensor) else float(loss)
    return float(np.exp(value))


def _pick(logits_row: np.ndarray, temperature: float, rng: np.random.Generator | None):
    if temperature <= 0:
        return logits_row.argmax(axis=-1)
    if rng is None:
        raise ValueError("temperature sampling needs an rng")
    z = logits_row.astype(np.float64) / temperature
    p = np.exp(z - z.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    return np.array([rng.choice(p.shape[-1], p=row) for row in p])


def prefill(model: LM2, state: SequenceState, prompt) -> np.ndarray:
    """Consume a prompt in segment-sized chunks; return the last position's logits."""
    ids = np.asarray(prompt, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[-1] == 0:
        raise ValueError("prompt is empty")
    S = model.config.segment_len
    last = None
    for s in range(0, ids.shape[1], S):
        last = model.forward_segment(state, ids[:, s:s + S]).data[:, -1, :]
    return last


def generate(model: LM2, state: SequenceState, prompt, max_new: int,
             temperature: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Autoregressive decoding, one token per forward pass after the prompt.

    ``prompt`` is (T,) or (B, T) and is consumed with the training segment
    length, so the first prediction matches training exactly. Every emitted
    token is fed back, so the bank is written after every step. Temperature
    0 is greedy.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    ids = np.asarray(prompt, dtype=np.int64)
    squeeze = ids.ndim == 1
    logits = prefill(model, state, ids)
    out = []
    for _ in range(max_new):
        nxt = np.asarray(_pick(logits, temperature, rng), dtype=np.int64)
        out.append(nxt)
        logits = model.forward_segment(state, nxt[:, None]).data[:, -1, :]
    tokens = np.stack(out, axis=1)
    return tokens[0] if squeeze else tokens
