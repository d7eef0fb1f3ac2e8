"""Memory-augmented decoder (explicit slot bank, gated read/write) in numpy."""
from .config import RunConfig, load_config, parse_config
from .memory import MemoryBank, MemoryParams, init_bank, memory_read, memory_update
from .model import LM2, ModelConfig, generate
from .numerics import Tape, Tensor, backward, grad_check, precision
from .tasks import Sample, Vocab, gen_qa, gen_recall, solve
from .training import OptimState, evaluate, load_checkpoint, save_checkpoint, train, train_step

__all__ = [
    "LM2", "MemoryBank", "MemoryParams", "ModelConfig", "OptimState", "RunConfig", "Sample",
    "Tape", "Tensor", "Vocab", "backward", "evaluate", "gen_qa", "gen_recall", "generate",
    "grad_check", "init_bank", "load_checkpoint", "load_config", "memory_read", "memory_update",
    "parse_config", "precision", "save_checkpoint", "solve", "train", "train_step",
]
__version__ = "0.1.0"
