"""Explicit memory bank: slot storage, cross-attention read, gated write.

The bank holds one d-vector per slot (shape ``(..., N, d)``; leading axes are
independent sequences). Tokens query the slots through cross-attention; the
result is scaled by an output gate before joining the residual stream. Writes
are computed in token space and folded into slot space with the read
attention, normalised per slot.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    DimensionError, Tensor, get_dtype, matmul, sigmoid, softmax_rows, tanh,
)

WRITE_EPS = 1e-8
_bank_ids = itertools.count(1)


class StaleReadError(RuntimeError):
    """A read result was applied to a bank state it was not computed from."""


@dataclass
class MemoryBank:
    M: Tensor
    version: int = 0

    def __post_init__(self):
        if self.version == 0:
            self.version = next(_bank_ids)

    @property
    def N(self) -> int:
        return self.M.shape[-2]

    @property
    def d(self) -> int:
        return self.M.shape[-1]

    def detached(self) -> "MemoryBank":
        """Same state, cut from any tape, new version stamp."""
        return MemoryBank(Tensor(self.M.data.copy(), dtype=self.M.dtype))


def init_bank(N: int, d: int, batch: int | None = None, dtype=None) -> MemoryBank:
    """Identity-initialised bank: row r is the one-hot vector e_(r mod d)."""
    if N < 1 or d < 1:
        raise ValueError(f"bank extents must be positive, got N={N}, d={d}")
    M = np.zeros((N, d), dtype=dtype or get_dtype())
    M[np.arange(N), np.arange(N) % d] = 1.0
    if batch is not None:
        M = np.broadcast_to(M, (batch, N, d)).copy()
    return MemoryBank(Tensor(M, dtype=M.dtype))


@dataclass
class MemoryParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_out: Tensor
    b_out: Tensor
    W_in: Tensor
    W_forget: Tensor

    NAMES = ("W_Q", "W_K", "W_V", "W_out", "b_out", "W_in", "W_forget")

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, gate_bias: float = -4.0,
             std: float | None = None, dtype=None, prefix: str = "") -> "MemoryParams":
        dtype = dtype or get_dtype()
        std = d ** -0.5 if std is None else std
        tensors = {}
        for name in cls.NAMES:
            if name == "b_out":
                data = np.full(d, gate_bias, dtype=dtype)
            else:
                data = (rng.standard_normal((d, d)) * std).astype(dtype)
            tensors[name] = Tensor(data, requires_grad=True, name=prefix + name, dtype=dtype)
        return cls(**tensors)

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.NAMES}

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]


@dataclass
class MemoryReadResult:
    E_mem: Tensor      # (..., T, d)
    A: Tensor          # (..., T, N)
    E_gated: Tensor    # (..., T, d)
    g_out: Tensor      # (..., T, d)
    scores: Tensor     # pre-softmax logits, (..., T, N)
    V: Tensor          # slot values, (..., N, d)
    bank_version: int


def memory_read(E: Tensor, bank: MemoryBank, params: MemoryParams,
                top_k: int | None = None) -> MemoryReadResult:
    d = params.d
    if E.shape[-1] != d or bank.d != d:
        raise DimensionError(
            f"memory_read: input width {E.shape[-1]} / bank width {bank.d} vs params {d}")
    Q = matmul(E, params.W_Q)
    K = matmul(bank.M, params.W_K)
    V = matmul(bank.M, params.W_V)
    scores = matmul(Q, K.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    A = softmax_rows(scores, top_k=top_k)
    E_mem = matmul(A, V)
    g_out = gate(E_mem, "output", params)
    return MemoryReadResult(E_mem=E_mem, A=A, E_gated=g_out * E_mem, g_out=g_out,
                            scores=scores, V=V, bank_version=bank.version)


def gate(x: Tensor, kind: str, params: MemoryParams) -> Tensor:
    """Sigmoid gate. ``input`` takes the block input E_t; ``forget`` and
    ``output`` take the retrieved memory E_mem."""
    if kind == "input":
        return sigmoid(matmul(x, params.W_in))
    if kind == "forget":
        return sigmoid(matmul(x, params.W_forget))
    if kind == "output":
        return sigmoid(matmul(x, params.W_out) + params.b_out)
    raise ValueError(f"unknown gate kind {kind!r}")


@dataclass
class MemoryWrite:
    """A slot-space update M_next = candidate + forget * M, not yet applied."""
    candidate: Tensor  # (..., N, d)
    forget: Tensor     # (..., N, d)
    bank_version: int


def write_weights(A: Tensor, aggregation: str = "attention", eps: float = WRITE_EPS) -> Tensor:
    """Token-to-slot aggregation weights, shape (..., N, T).

    ``attention``: transposed read attention, each slot row normalised by its
    total mass plus ``eps``. ``mean``: uniform 1/T.
    """
    if aggregation == "attention":
        At = A.swapaxes(-1, -2)
        return At / (At.sum(axis=-1, keepdims=True) + eps)
    if aggregation == "mean":
        *lead, T, N = A.shape
        return Tensor(np.full((*lead, N, T), 1.0 / T, dtype=A.dtype), dtype=A.dtype)
    raise ValueError(f"unknown write aggregation {aggregation!r}")


def propose_update(E: Tensor, read: MemoryReadResult, params: MemoryParams,
                   aggregation: str = "attention") -> MemoryWrite:
    g_in = gate(E, "input", params)
    g_forget = gate(read.E_mem, "forget", params)
    W = write_weights(read.A, aggregation)
    candidate = matmul(W, g_in * tanh(read.E_mem))
    forget = matmul(W, g_forget)
    return MemoryWrite(candidate, forget, read.bank_version)


def apply_update(bank: MemoryBank, write: MemoryWrite) -> MemoryBank:
    return MemoryBank(write.candidate + write.forget * bank.M)


def memory_update(bank: MemoryBank, E_t: Tensor, read: MemoryReadResult,
                  params: MemoryParams, aggregation: str = "attention") -> MemoryBank:
    """One gated write. ``read`` must come from this exact bank state."""
    if read.bank_version != bank.version:
        raise StaleReadError(
            f"read was computed against bank version {read.bank_version}, bank is at {bank.version}")
    return apply_update(bank, propose_update(E_t, read, params, aggregation))
