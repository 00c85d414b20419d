"""Synthetic token data for desk-scale runs."""

from __future__ import annotations

from typing import Iterator

import numpy as np


def copy_task_batch(seed: int, step: int, vocab: int, batch: int, seq: int) -> tuple[np.ndarray, np.ndarray]:
    """Random token rows whose target at each position is the input token itself.

    The batch depends only on ``(seed, step)``, so a resumed run sees the same
    data an uninterrupted one would.
    """
    rng = np.random.default_rng([seed, step])
    tokens = rng.integers(0, vocab, size=(batch, seq), dtype=np.int64)
    return tokens, tokens.copy()


def copy_task_stream(seed: int, vocab: int, batch: int, seq: int, start: int = 1) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    step = start
    while True:
        yield copy_task_batch(seed, step, vocab, batch, seq)
        step += 1
