"""Read-only analysis of memory behaviour: heatmaps, slot ranking, bank deltas."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoder import KVCache
from .memory import MemoryBank
from .model import LM2, SequenceState
from .numerics import ConfigError, DimensionError, Tensor, finite_checks
from .tasks import Sample, Vocab, decode, encode


@dataclass
class HeatmapExport:
    block: int
    step: int
    row_labels: list[str]
    col_labels: list[int]
    A: np.ndarray          # (T, N)
    normalization: str = "softmax"

    def __post_init__(self):
        if self.A.shape != (len(self.row_labels), len(self.col_labels)):
            raise DimensionError(
                f"heatmap matrix {self.A.shape} does not match {len(self.row_labels)} rows "
                f"x {len(self.col_labels)} columns")

    def to_text(self) -> str:
        lines = ["\t".join(str(c) for c in self.col_labels)]
        for tok, row in zip(self.row_labels, self.A):
            lines.append(tok + "\t" + "\t".join(f"{v:.9g}" for v in row))
        return "\n".join(lines) + "\n"


def read_heatmap(path) -> tuple[list[int], list[str], np.ndarray]:
    """Parse a heatmap grid back into (column labels, row tokens, matrix)."""
    lines = Path(path).read_text().splitlines()
    cols = [int(c) for c in lines[0].split("\t")]
    rows, values = [], []
    for line in lines[1:]:
        tok, *vals = line.split("\t")
        rows.append(tok)
        values.append([float(v) for v in vals])
    return cols, rows, np.array(values).reshape(len(rows), len(cols))


def _check_block(model: LM2, block: int) -> None:
    if block not in model.memory_block_indices():
        raise ConfigError(
            f"block: {block} has no active memory (memory blocks: {model.memory_block_indices()})")


def _run_capture(model: LM2, state: SequenceState, ids: np.ndarray, block: int):
    """Forward ``ids`` (1-D) through ``state`` segment by segment, yielding reads of ``block``."""
    S = model.config.segment_len
    with finite_checks(False):
        for s in range(0, len(ids), S):
            cap: dict = {}
            model.forward_segment(state, ids[None, s:s + S], capture=cap)
            yield ids[s:s + S], cap[block]


def export_heatmap(model: LM2, state: SequenceState, tokens, block: int, path=None,
                   vocab: Vocab | None = None) -> HeatmapExport:
    """Cross-attention of ``tokens`` over the slots of ``block``'s bank.

    The tokens are run on a clone of ``state``, so the caller's state (and any
    later logits) is untouched. Rows come from batch element 0.
    """
    _check_block(model, block)
    vocab = vocab or Vocab.default()
    ids = np.asarray(encode(tokens, vocab) if not isinstance(tokens, np.ndarray) else tokens,
                     dtype=np.int64)
    if ids.ndim != 1 or len(ids) == 0:
        raise DimensionError("export_heatmap expects a nonempty 1-D token sequence")
    probe = state.clone()
    if probe.batch != 1:
        probe.banks = [MemoryBank(Tensor(b.M.data[:1].copy())) for b in probe.banks]
        probe.caches = [KVCache() if c.k is None else
                        KVCache(Tensor(c.k.data[:1].copy()), Tensor(c.v.data[:1].copy()))
                        for c in probe.caches]
        probe.batch = 1
    rows = [read.A.data[0] for _, read in _run_capture(model, probe, ids, block)]
    A = np.concatenate(rows, axis=0).astype(np.float64)
    labels = decode(ids, vocab).split()
    out = HeatmapExport(block, state.cursor, labels, list(range(A.shape[1])), A)
    if path is not None:
        Path(path).write_text(out.to_text())
    return out


def heatmap_l1(a: HeatmapExport, b: HeatmapExport) -> float:
    if a.A.shape != b.A.shape:
        raise DimensionError(f"heatmaps differ in shape: {a.A.shape} vs {b.A.shape}")
    return float(np.abs(a.A - b.A).sum())


@dataclass
class SlotReport:
    slot: int
    relevance: float
    top_tokens: list[str]
    sign_profile: float     # fraction of negative pre-softmax scores for this slot

    def to_record(self) -> dict:
        return {"slot": self.slot, "relevance": self.relevance,
                "top_tokens": self.top_tokens, "sign_profile": self.sign_profile}


@dataclass
class SlotRanking:
    top: list[SlotReport]
    bottom: list[SlotReport]
    scores: np.ndarray = field(repr=False)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for tag, reports in (("top", self.top), ("bottom", self.bottom)):
                for r in reports:
                    fh.write(json.dumps({"rank": tag, **r.to_record()}, sort_keys=True) + "\n")


def rank_slots(model: LM2, probes: Sequence[Sample], top_m: int, block: int | None = None,
               state: SequenceState | None = None, vocab: Vocab | None = None,
               n_tokens: int = 5) -> SlotRanking:
    """Rank slots by mean over probe tokens of A[t, r] * ||V[r]||.

    Each probe runs from a clone of ``state`` (a fresh state by default).
    Ties are broken by slot index. Sums use ``math.fsum`` so scores do not
    depend on probe order.
    """
    if not probes:
        raise ValueError("probe set is empty")
    blocks = model.memory_block_indices()
    if not blocks:
        raise ConfigError("block: model has no active memory blocks")
    block = blocks[0] if block is None else block
    _check_block(model, block)
    N = model.config.N
    if not 1 <= top_m <= N:
        raise ValueError(f"top_m must be in [1, N={N}], got {top_m}")
    vocab = vocab or Vocab.default()
    base = state if state is not None else model.new_state(1)
    contrib: list[list[float]] = [[] for _ in range(N)]
    negative = np.zeros(N)
    best: list[dict[str, float]] = [{} for _ in range(N)]
    count = 0
    for sample in probes:
        ids = np.asarray(encode(sample.tokens(), vocab), dtype=np.int64)
        for seg_ids, read in _run_capture(model, base.clone(), ids, block):
            A = read.A.data[0].astype(np.float64)            # (T, N)
            vnorm = np.linalg.norm(read.V.data[0].astype(np.float64), axis=-1)
            weighted = A * vnorm[None, :]
            negative += (read.scores.data[0] < 0).sum(axis=0)
            count += len(seg_ids)
            words = decode(seg_ids, vocab).split()
            for r in range(N):
                contrib[r].extend(weighted[:, r].tolist())
                seen = best[r]
                for w, a in zip(words, A[:, r]):
                    if a > seen.get(w, -1.0):
                        seen[w] = float(a)
    scores = np.array([math.fsum(c) / count for c in contrib])
    order = sorted(range(N), key=lambda r: (-scores[r], r))

    def report(r: int) -> SlotReport:
        toks = sorted(best[r].items(), key=lambda kv: (-kv[1], kv[0]))[:n_tokens]
        return SlotReport(r, float(scores[r]), [t for t, _ in toks], float(negative[r] / count))

    return SlotRanking([report(r) for r in order[:top_m]],
                       [report(r) for r in sorted(range(N), key=lambda r: (scores[r], r))[:top_m]], scores)


@dataclass
class MemoryDelta:
    per_slot_l1: np.ndarray     # (n_banks, N)
    top_changed: list[int]
    total: float

    def to_record(self) -> dict:
        return {"per_slot_l1": self.per_slot_l1.tolist(), "top_changed": self.top_changed,
                "total": self.total}


def _banks(x) -> list[np.ndarray]:
    if isinstance(x, SequenceState):
        return [b.M.data for b in x.banks]
    if isinstance(x, MemoryBank):
        return [x.M.data]
    return [np.asarray(x)]


def memory_delta(before, after, top: int = 5) -> MemoryDelta:
    """Per-slot L1 change between two states (or banks); slots ranked by change."""
    a, b = _banks(before), _banks(after)
    if len(a) != len(b) or any(x.shape != y.shape for x, y in zip(a, b)):
        raise DimensionError(
            f"memory_delta: bank shapes differ: {[x.shape for x in a]} vs {[y.shape for y in b]}")
    if not a:
        raise ConfigError("memory_delta: states carry no memory banks")
    per = []
    for x, y in zip(a, b):
        diff = np.abs(x.astype(np.float64) - y.astype(np.float64))
        # fold batch axes, keep (N,)
        per.append(diff.reshape(-1, *diff.shape[-2:]).sum(axis=(0, 2)))
    per_slot = np.stack(per)
    slot_total = per_slot.sum(axis=0)
    order = sorted(range(len(slot_total)), key=lambda r: (-slot_total[r], r))
    changed = [r for r in order if slot_total[r] > 0][:top]
    return MemoryDelta(per_slot, changed, float(slot_total.sum()))
