"""Optimizer, training loop, evaluation and checkpoint persistence."""
from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .model import LM2, ModelConfig, generate, lm_loss
from .numerics import NonFiniteError, Tape, Tensor, backward, finite_checks
from .tasks import PAD, Sample, Vocab, decode, encode, gen_qa, gen_recall


class TrainingDiverged(RuntimeError):
    pass


# optimizer ----------------------------------------------------------------

def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.dot(g.reshape(-1), g.reshape(-1))) for g in grads))


def clip_grads(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


@dataclass
class OptimState:
    """Decoupled-weight-decay Adam with linear warmup and cosine decay."""
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    warmup: int = 100
    total_steps: int = 10000
    min_lr_ratio: float = 0.1
    clip: float = 1.0
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "OptimState":
        return cls(lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
                   warmup=cfg.warmup_steps, total_steps=cfg.steps,
                   min_lr_ratio=cfg.min_lr_ratio, clip=cfg.grad_clip)

    def lr_at(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(1, self.total_steps - self.warmup)
        progress = min(1.0, (step - self.warmup) / span)
        floor = self.lr * self.min_lr_ratio
        return floor + 0.5 * (self.lr - floor) * (1 + math.cos(math.pi * progress))

    def apply(self, params: dict[str, Tensor]) -> float:
        """Clip, then update every parameter that has a gradient. Returns pre-clip norm."""
        live = [p for p in params.values() if p.grad is not None]
        norm = clip_grads(live, self.clip)
        lr = self.lr_at(self.step)
        b1, b2 = self.betas
        t = self.step + 1
        c1, c2 = 1 - b1 ** t, 1 - b2 ** t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if p.ndim >= 2 and self.weight_decay:
                p.data *= p.dtype.type(1 - lr * self.weight_decay)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)
        self.step += 1
        return norm

    def scalars(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "weight_decay": self.weight_decay,
                "warmup": self.warmup, "total_steps": self.total_steps,
                "min_lr_ratio": self.min_lr_ratio, "clip": self.clip, "eps": self.eps,
                "step": self.step}


# batches -----------------------------------------------------------------

@dataclass
class Batch:
    inputs: np.ndarray    # (B, T)
    targets: np.ndarray   # (B, T)
    weights: np.ndarray   # (B, T), 1 where the target counts toward the loss

    @property
    def n_tokens(self) -> int:
        return int((self.inputs != PAD).sum())


def recall_pairs(sample: Sample) -> list[tuple[str, str]]:
    """Key/value pairs of a recall sample in context order."""
    ctx = sample.context
    return [(ctx[i], ctx[i + 1]) for i in range(len(ctx) - 1)
            if ctx[i].startswith("k") and ctx[i + 1].startswith("v")]


def _sequence(sample: Sample, queries: int, rng) -> tuple[tuple[str, ...], list[int]]:
    """Token sequence plus indices of scored tokens.

    With ``queries > 1`` a recall sample gets extra ``? key value`` drills for
    other keys after its own question, which multiplies the supervised tokens
    without changing the first (evaluated) query.
    """
    toks = sample.tokens()
    scored = list(range(len(sample.prompt), len(toks)))
    if queries > 1 and sample.kind == "recall":
        others = [p for p in recall_pairs(sample) if p[0] != sample.question[-1]]
        if rng is not None:
            others = [others[i] for i in rng.permutation(len(others))]
        for k, v in others[:queries - 1]:
            toks = toks + ("?", k, v)
            scored.append(len(toks) - 1)
    return toks, scored


def make_batch(samples: Sequence[Sample], vocab: Vocab, mode: str = "task",
               queries: int = 1, rng: np.random.Generator | None = None) -> Batch:
    """Right-padded next-token batch. ``task`` scores answer tokens only."""
    if mode not in ("task", "lm"):
        raise ValueError(f"unknown loss mode {mode!r}")
    built = [_sequence(s, queries, rng) for s in samples]
    seqs = [encode(toks, vocab) for toks, _ in built]
    T = max(len(s) for s in seqs) - 1
    inputs = np.full((len(seqs), T), PAD, dtype=np.int64)
    targets = np.full((len(seqs), T), PAD, dtype=np.int64)
    weights = np.zeros((len(seqs), T))
    for i, (ids, (_, scored)) in enumerate(zip(seqs, built)):
        n = len(ids) - 1
        inputs[i, :n] = ids[:-1]
        targets[i, :n] = ids[1:]
        if mode == "task":
            weights[i, [j - 1 for j in scored]] = 1.0
        else:
            weights[i, :n] = 1.0
    return Batch(inputs, targets, weights)


def repeat_batch(rng: np.random.Generator, vocab_size: int, batch: int,
                 min_len: int = 6, max_len: int = 20, low: int = 16) -> Batch:
    """Random token runs followed by an exact copy; only the copy is scored.

    Predicting the copy needs "find the earlier occurrence of the current
    token and emit its successor", the same lookup recall relies on, so a few
    hundred steps of this give recall training a working starting circuit.
    """
    width = 2 * max_len
    seqs = np.full((batch, width + 1), PAD, dtype=np.int64)
    weights = np.zeros((batch, width))
    for b in range(batch):
        n = int(rng.integers(min_len, max_len + 1))
        run = rng.integers(low, vocab_size, size=n)
        seqs[b, :2 * n] = np.concatenate([run, run])
        weights[b, n:2 * n - 1] = 1.0
    return Batch(seqs[:, :-1], seqs[:, 1:], weights)


def _token_batch(tokens: np.ndarray) -> Batch:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    return Batch(tokens[:, :-1], tokens[:, 1:], np.ones(tokens[:, 1:].shape))


def _diagnose(model: LM2, batch: Batch) -> str:
    try:
        with finite_checks(True), Tape() as tape:
            loss = lm_loss(model.forward(batch.inputs), batch.targets, batch.weights)
        backward(loss, tape)
    except NonFiniteError as exc:
        return str(exc)
    return "non-finite loss, but no single operation could be identified"


def train_step(model: LM2, batch: Sequence[Sample] | Batch, optim: OptimState,
               vocab: Vocab | None = None, mode: str = "task", queries: int = 1,
               rng: np.random.Generator | None = None) -> dict:
    if not isinstance(batch, Batch):
        if not batch:
            raise ValueError("batch is empty")
        batch = make_batch(batch, vocab or Vocab.default(), mode, queries, rng)
    model.zero_grad()
    with finite_checks(False):
        with Tape() as tape:
            logits = model.forward(batch.inputs)
            loss = lm_loss(logits, batch.targets, batch.weights)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"step {optim.step}: {_diagnose(model, batch)}")
        backward(loss, tape)
    params = model.parameters()
    grads = [p.grad for p in params.values() if p.grad is not None]
    if not all(np.isfinite(g).all() for g in grads):
        raise TrainingDiverged(f"step {optim.step}: {_diagnose(model, batch)}")
    norm = optim.apply(params)
    return {"loss": value, "ppl": math.exp(min(value, 700.0)), "grad_norm": norm,
            "tokens": batch.n_tokens}


# evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    mode: str
    value: float
    n: int
    loss: float | None = None

    def to_dict(self) -> dict:
        return {"mode": self.mode, "value": self.value, "n": self.n, "loss": self.loss}


def greedy_answers(model: LM2, samples: Sequence[Sample], vocab: Vocab,
                   batch_size: int = 64) -> list[tuple[str, ...]]:
    """Greedy decode of each sample's answer length, batched by prompt shape."""
    groups: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault((len(s.prompt), len(s.answer)), []).append(i)
    out: list = [None] * len(samples)
    for (_, n_ans), idx in sorted(groups.items()):
        for c in range(0, len(idx), batch_size):
            chunk = idx[c:c + batch_size]
            prompts = np.array([encode(samples[i].prompt, vocab) for i in chunk])
            state = model.new_state(len(chunk))
            with finite_checks(False):
                toks = generate(model, state, prompts, n_ans)
            for i, row in zip(chunk, toks):
                out[i] = tuple(decode(row, vocab).split())
    return out


def evaluate(model, eval_set, mode: str = "exact_match", vocab: Vocab | None = None,
             loss_mode: str = "task", batch_size: int = 64) -> EvalReport:
    """Perplexity (``ppl``) or exact-match accuracy (``exact_match``).

    ``eval_set`` is a list of samples or, for ``ppl``, an integer token array
    (n, T) scored on every position. For ``exact_match`` a plain callable
    mapping samples to answer tuples may stand in for the model.
    """
    if len(eval_set) == 0:
        raise ValueError("eval set is empty")
    vocab = vocab or Vocab.default()
    if mode == "ppl":
        total, weight = 0.0, 0.0
        for c in range(0, len(eval_set), batch_size):
            chunk = eval_set[c:c + batch_size]
            batch = (_token_batch(chunk) if isinstance(eval_set, np.ndarray)
                     else make_batch(chunk, vocab, loss_mode))
            with finite_checks(False):
                loss = lm_loss(model.forward(batch.inputs), batch.targets, batch.weights).item()
            w = batch.weights.sum()
            total += loss * w
            weight += w
        mean = total / weight
        return EvalReport("ppl", math.exp(mean), len(eval_set), mean)
    if mode == "exact_match":
        if isinstance(model, LM2):
            preds = greedy_answers(model, eval_set, vocab, batch_size)
        else:
            preds = [tuple(p) for p in model(eval_set)]
        hits = sum(p == s.answer for p, s in zip(preds, eval_set))
        return EvalReport("exact_match", hits / len(eval_set), len(eval_set))
    raise ValueError(f"unknown eval mode {mode!r}")


# data ----------------------------------------------------------------------

def make_samples(cfg: RunConfig, rng: np.random.Generator, n: int) -> list[Sample]:
    if cfg.task == "recall":
        return [gen_recall(rng, cfg.n_pairs, cfg.filler_len) for _ in range(n)]
    return [gen_qa(rng, cfg.task, cfg.filler_len) for _ in range(n)]


class DataStream:
    """Deterministic batches: a fixed corpus cycled in order, or fresh samples."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.corpus = make_samples(cfg, rng, cfg.train_size) if cfg.train_size else None
        self.cursor = 0

    def next_batch(self) -> list[Sample]:
        if self.corpus is None:
            return make_samples(self.cfg, self.rng, self.cfg.batch_size)
        out = []
        for _ in range(self.cfg.batch_size):
            out.append(self.corpus[self.cursor % len(self.corpus)])
            self.cursor += 1
        return out


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(training data rng, held-out eval rng), independent of model init."""
    data_ss, eval_ss = np.random.SeedSequence([seed, 1]).spawn(2)
    return np.random.default_rng(data_ss), np.random.default_rng(eval_ss)


def validation_rng(seed: int) -> np.random.Generator:
    """Stream for the samples that drive periodic eval and early stopping.

    Kept apart from the held-out stream so a stopping decision never sees
    the set the final score is reported on.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, 2]))


# checkpoints ---------------------------------------------------------------

MAGIC = b"LM2CKPT\x00"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic, unsupported version, or a corrupted header."""


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict | None = None
    history: list = field(default_factory=list)
    optim: dict | None = None
    with_memory: bool = True
    run_config: dict | None = None


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, model: LM2, optim: OptimState | None = None,
                    rng: np.random.Generator | None = None, history: list | None = None,
                    run_config: RunConfig | None = None) -> Path:
    path = Path(path)
    config = model.config.to_dict()
    tensors = {name: p.data for name, p in model.parameters().items()}
    if optim is not None:
        for name in sorted(optim.m):
            tensors[f"optim.m.{name}"] = optim.m[name]
            tensors[f"optim.v.{name}"] = optim.v[name]
    header = {
        "config": config,
        "with_memory": model.with_memory,
        "step": optim.step if optim is not None else 0,
        "optim": optim.scalars() if optim is not None else None,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "history": history or [],
        "run_config": run_config.to_dict() if run_config is not None else None,
        "tensors": len(tensors),
    }
    blob = _canonical(header)
    parts = [MAGIC, struct.pack("<I", VERSION), hashlib.sha256(_canonical(config)).digest(),
             hashlib.sha256(blob).digest(), struct.pack("<Q", len(blob)), blob]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        enc = name.encode()
        parts.append(struct.pack("<I", len(enc)) + enc)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<Q", len(raw)) + raw)
    path.write_bytes(b"".join(parts))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("not an LM2 checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    config_digest = r.take(32)
    header_digest = r.take(32)
    (n,) = r.unpack("<Q")
    blob = r.take(n)
    if hashlib.sha256(blob).digest() != header_digest:
        raise CheckpointFormatError("checkpoint header is corrupted (digest mismatch)")
    header = json.loads(blob)
    if hashlib.sha256(_canonical(header["config"])).digest() != config_digest:
        raise CheckpointFormatError("config digest does not match the stored config")
    tensors = {}
    for _ in range(header["tensors"]):
        (ln,) = r.unpack("<I")
        name = r.take(ln).decode()
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        (nbytes,) = r.unpack("<Q")
        dtype = _CODE_DTYPES[code]
        arr = np.frombuffer(r.take(nbytes), dtype=dtype.newbyteorder("<")).astype(dtype)
        tensors[name] = arr.reshape(shape)
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{len(r.data) - r.pos} trailing bytes after last tensor")
    return Checkpoint(header["config"], tensors, header["step"], header["rng_state"],
                      header["history"], header["optim"], header["with_memory"],
                      header.get("run_config"))


def restore(ckpt: Checkpoint, model: LM2 | None = None) -> tuple[LM2, OptimState | None]:
    """Load checkpoint tensors into ``model`` (built from the stored config if omitted)."""
    if model is None:
        model = LM2(ModelConfig.from_dict(ckpt.config), with_memory=ckpt.with_memory)
    params = model.parameters()
    stored = {k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")}
    missing = sorted(set(params) - set(stored))
    if missing:
        raise CheckpointShapeError(f"{missing[0]}: tensor missing from checkpoint")
    extra = sorted(set(stored) - set(params))
    if extra:
        raise CheckpointShapeError(f"{extra[0]}: checkpoint tensor has no counterpart in model")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise CheckpointShapeError(
                f"{name}: checkpoint shape {stored[name].shape} != model shape {p.shape}")
    for name, p in params.items():
        p.data = stored[name].astype(p.dtype, copy=True)
        p.grad = None
    optim = None
    if ckpt.optim is not None:
        o = dict(ckpt.optim)
        optim = OptimState(lr=o["lr"], betas=tuple(o["betas"]), weight_decay=o["weight_decay"],
                           warmup=o["warmup"], total_steps=o["total_steps"],
                           min_lr_ratio=o["min_lr_ratio"], clip=o["clip"], eps=o["eps"],
                           step=o["step"])
        for key, arr in ckpt.tensors.items():
            if key.startswith("optim.m."):
                optim.m[key[len("optim.m."):]] = arr.copy()
            elif key.startswith("optim.v."):
                optim.v[key[len("optim.v."):]] = arr.copy()
    return model, optim


def load_checkpoint(path, model: LM2 | None = None):
    ckpt = read_checkpoint(path)
    model, optim = restore(ckpt, model)
    return model, optim, ckpt


def checkpoint_roundtrip(model: LM2, optim: OptimState | None, path,
                         rng: np.random.Generator | None = None) -> tuple[LM2, OptimState | None]:
    save_checkpoint(path, model, optim, rng)
    model2, optim2, _ = load_checkpoint(path)
    return model2, optim2


# experiments ---------------------------------------------------------------

def write_metrics(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train(cfg: RunConfig, model: LM2 | None = None, vocab: Vocab | None = None,
          on_step: Callable[[dict], None] | None = None, out_dir=None,
          eval_samples: Sequence[Sample] | None = None,
          resume: Checkpoint | None = None,
          on_eval: Callable[[dict], None] | None = None) -> dict:
    """Train for ``cfg.steps`` steps (or until ``target_accuracy``).

    Returns ``{"model", "optim", "history", "evals", "wall_clock", "rng"}``.
    History records are {step, tokens, loss, ppl, grad_norm}; they contain no
    timing so identical runs produce identical files. With ``resume`` the
    parameters, optimizer, data position and history are restored, and the
    continued run matches an uninterrupted one.
    """
    vocab = vocab or Vocab.default()
    data_rng, _ = seed_streams(cfg.seed)
    if eval_samples is None and (cfg.eval_every or cfg.target_accuracy):
        eval_samples = make_samples(cfg, validation_rng(cfg.seed), cfg.eval_size)
    stream = DataStream(cfg, data_rng)
    if resume is not None:
        model, optim = restore(resume, model)
        if optim is None:
            raise CheckpointFormatError("checkpoint has no optimizer state to resume from")
        optim.total_steps = cfg.steps
        history = [dict(r) for r in resume.history]
        data_rng.bit_generator.state = resume.rng_state
        stream.cursor = max(0, optim.step - cfg.induction_steps) * cfg.batch_size
    else:
        model = model or LM2(cfg.model_config())
        optim = OptimState.from_config(cfg)
        history = []
    evals: list[dict] = []
    tokens = history[-1]["tokens"] if history else 0
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        metrics_fh = open(out / "metrics.jsonl", "w")
        for rec in history:
            metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
    t0 = time.perf_counter()
    try:
        while optim.step < cfg.steps:
            if optim.step < cfg.induction_steps:
                batch = repeat_batch(data_rng, cfg.vocab_size, cfg.induction_batch)
            else:
                batch = stream.next_batch()
            metrics = train_step(model, batch, optim, vocab, cfg.loss_mode,
                                 cfg.train_queries, data_rng)
            tokens += metrics.pop("tokens")
            rec = {"step": optim.step, "tokens": tokens, **metrics}
            history.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                metrics_fh.flush()
            if on_step is not None:
                on_step(rec)
            if out is not None and cfg.checkpoint_every and optim.step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"step{optim.step:06d}.ckpt", model, optim, data_rng, history,
                                cfg)
            due = cfg.eval_every and optim.step % cfg.eval_every == 0
            if due and optim.step > cfg.induction_steps:
                rep = evaluate(model, eval_samples, "exact_match", vocab)
                evals.append({"step": optim.step, "exact_match": rep.value})
                if on_eval is not None:
                    on_eval(evals[-1])
                if cfg.target_accuracy and rep.value >= cfg.target_accuracy:
                    break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    wall = time.perf_counter() - t0
    if out is not None:
        save_checkpoint(out / "final.ckpt", model, optim, data_rng, history, cfg)
    return {"model": model, "optim": optim, "history": history, "evals": evals,
            "wall_clock": wall, "rng": data_rng}


@dataclass
class VariantResult:
    name: str
    series: list[dict]
    final_ppl: float
    final_loss: float


def sweep_variants(cfg: RunConfig) -> list[tuple[str, int | None, bool]]:
    """(name, k_memory_blocks, memory_on) for the block-count sweep."""
    out = [(f"k={k}", k, True) for k in cfg.sweep_k]
    out += [("vanilla", None, False), ("memory_off", cfg.L, False)]
    return out


def build_variant(cfg: RunConfig, k: int | None, memory_on: bool) -> LM2:
    if k is None:
        return LM2(cfg.model_config(), with_memory=False)
    return LM2(cfg.model_config(k_memory_blocks=k, memory_enabled=memory_on))


def run_experiment(cfg: RunConfig, budget: int | None = None, vocab: Vocab | None = None,
                   out_dir=None, variants=None) -> dict[str, VariantResult]:
    """Memory-in-first-k-blocks sweep under identical seeds and data order.

    Each variant's series holds per-step {step, tokens, ppl}; ``final_ppl`` is
    measured on a held-out set drawn from the eval stream.
    """
    vocab = vocab or Vocab.default()
    cfg = cfg.replace(steps=budget or cfg.steps, eval_every=0, target_accuracy=0.0)
    _, eval_rng = seed_streams(cfg.seed)
    held_out = make_samples(cfg, eval_rng, cfg.eval_size)
    results = {}
    for name, k, memory_on in variants or sweep_variants(cfg):
        model = build_variant(cfg, k, memory_on)
        run = train(cfg, model, vocab)
        series = [{"step": r["step"], "tokens": r["tokens"], "ppl": r["ppl"]} for r in run["history"]]
        rep = evaluate(model, held_out, "ppl", vocab, loss_mode=cfg.loss_mode)
        results[name] = VariantResult(name, series, rep.value, rep.loss)
        if out_dir is not None:
            write_metrics(Path(out_dir) / f"metrics_{name.replace('=', '')}.jsonl", series)
    if out_dir is not None:
        write_comparison(Path(out_dir) / "comparison.tsv", results)
    return results


def write_comparison(path, results: dict[str, VariantResult]) -> None:
    lines = ["variant\tsteps\ttokens\tfinal_train_ppl\theldout_ppl"]
    for name, r in results.items():
        last = r.series[-1]
        lines.append(f"{name}\t{last['step']}\t{last['tokens']}\t{last['ppl']:.6f}\t{r.final_ppl:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")
