"""Input checks for the estimator front end."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_tokens(X, vocab: int, seq: int | None = None, name: str = "X") -> np.ndarray:
    """2-D integer token matrix with every id in ``[0, vocab)``."""
    X = check_array(X, dtype=None, ensure_2d=True, ensure_all_finite=True, input_name=name)
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValueError(f"{name} must hold integer token ids")
        X = X.astype(np.int64)
    if seq is not None and X.shape[1] != seq:
        raise ValueError(f"{name} has sequence length {X.shape[1]}, model expects {seq}")
    if X.min() < 0 or X.max() >= vocab:
        raise ValueError(f"{name} holds token ids outside [0, {vocab})")
    return X.astype(np.int64, copy=False)


def check_pair(X, y, vocab: int, seq: int) -> tuple[np.ndarray, np.ndarray]:
    X = check_tokens(X, vocab, seq)
    y = X.copy() if y is None else check_tokens(y, vocab, seq, name="y")
    if y.shape != X.shape:
        raise ValueError(f"y shape {y.shape} does not match X shape {X.shape}")
    return X, y
