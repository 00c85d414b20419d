import sys
from pathlib import Path

import numpy as np
import pytest

from ramstream.config import ModelConfig

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def tiny(**kw) -> ModelConfig:
    base = dict(n_layers=3, hidden=8, ffn=12, vocab=11, seq=5, batch=2, ckpt_interval=1)
    base.update(kw)
    return ModelConfig(**base)


def batch_for(cfg: ModelConfig, seed: int = 0):
    rng = np.random.default_rng(seed)
    shape = (cfg.batch, cfg.seq)
    return rng.integers(0, cfg.vocab, shape), rng.integers(0, cfg.vocab, shape)


def rel_err(a, b) -> float:
    """Max abs difference normalised by the reference's max magnitude."""
    scale = float(np.abs(b).max())
    return float(np.abs(np.asarray(a, np.float64) - b).max()) / (scale if scale > 0 else 1.0)


@pytest.fixture
def cfg():
    return tiny()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    RESULTS = module.RESULTS
    terminalreporter.section("acceptance criteria")
    for num in sorted(RESULTS):
        ok, line = RESULTS[num]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {num:>2}: {line}")
