import numpy as np
import pytest

from lm2.model import LM2, ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=32, d=16, L=2, k_memory_blocks=2, N=8, n_heads=2, n_kv_heads=1,
                d_ff=32, segment_len=4, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def build(cfg: ModelConfig, with_memory: bool = True) -> LM2:
    return LM2(cfg, with_memory=with_memory)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
