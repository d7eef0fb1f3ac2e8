"""Flat ``key = value`` run configuration with typed validation."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields

from .model import ModelConfig
from .numerics import ConfigError
from .tasks import TASK_KINDS, Vocab

_MODEL_KEYS = [f.name for f in fields(ModelConfig)]


@dataclass
class RunConfig:
    # model
    vocab_size: int = len(Vocab.default())
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
    memory_enabled: bool = True
    tie_embeddings: bool = False
    write_aggregation: str = "attention"
    init_std: float = 0.02
    norm_eps: float = 1e-6
    # task
    task: str = "recall"
    n_pairs: int = 4
    filler_len: int = 128
    train_size: int = 0          # 0 streams fresh samples every step
    eval_size: int = 256
    loss_mode: str = "task"      # task: answer tokens only; lm: every token
    train_queries: int = 1       # recall: extra "? key value" drills per training sample
    induction_steps: int = 0     # leading steps on the copy-a-random-run warm-up task
    induction_batch: int = 32
    # optimisation
    steps: int = 1000
    batch_size: int = 8
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    grad_clip: float = 1.0
    eval_every: int = 0          # 0 disables periodic evaluation
    checkpoint_every: int = 0    # 0 writes only the final checkpoint
    target_accuracy: float = 0.0  # stop early once exact match reaches this (0 = never)
    sweep_k: list[int] = field(default_factory=lambda: [1, 4])
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASK_KINDS:
            raise ConfigError(f"task: must be one of {TASK_KINDS}")
        if self.loss_mode not in ("task", "lm"):
            raise ConfigError("loss_mode: must be 'task' or 'lm'")
        for name in ("steps", "batch_size", "n_pairs", "eval_size", "train_queries",
                     "induction_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        for name in ("filler_len", "train_size", "warmup_steps", "eval_every", "checkpoint_every",
                     "induction_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr: must be >= 0")
        if not 0 <= self.target_accuracy <= 1:
            raise ConfigError("target_accuracy: must be in [0, 1]")
        if any(not 1 <= k <= self.L for k in self.sweep_k):
            raise ConfigError(f"sweep_k: every entry must be in [1, L={self.L}]")
        self.model_config()

    def model_config(self, **overrides) -> ModelConfig:
        values = {k: getattr(self, k) for k in _MODEL_KEYS if hasattr(self, k)}
        values.update(overrides)
        return ModelConfig(**values)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, raw: str, hint):
    text = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin in (typing.Union, types.UnionType) and type(None) in args:
            if text.lower() in ("none", ""):
                return None
            inner = next(a for a in args if a is not type(None))
            return _coerce(name, text, inner)
        if origin is list:
            return [int(x) for x in text.replace(",", " ").split()]
        if hint is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except (ValueError, StopIteration):
        raise ConfigError(f"{name}: cannot parse {raw.strip()!r} as {getattr(hint, '__name__', hint)}")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment). Unknown keys are errors."""
    hints = typing.get_type_hints(RunConfig)
    values = {} if base is None else base.to_dict()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in hints:
            raise ConfigError(f"{key}: unknown config key")
        values[key] = _coerce(key, raw, hints[key])
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = "none"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
