"""Estimator front end: train a token model with the streaming engine or the reference trainer.

``X`` is an ``(n_samples, seq)`` matrix of token ids and ``y`` the matching
targets (defaults to ``X``, the copy task). Each optimizer step draws
``batch`` rows of ``X`` with a generator seeded by ``(random_state, step)``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_pair, check_tokens
from .config import AdamConfig, ModelConfig
from .engine import StreamingEngine
from .host_store import build_store
from .numerics import BlockParams, block_forward, embed_forward, head_forward
from .oracle import _adam, oracle_forward_backward


def _forward_logits(params: dict, tokens: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    x = embed_forward(tokens, params["embed"])
    for i in range(1, cfg.n_layers + 1):
        prefix = f"block.{i}."
        theta = BlockParams(**{k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)})
        x, _ = block_forward(x, theta)
    return head_forward(x, params["embed"] if cfg.tie_embeddings else params["head"])


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _TokenModelBase(BaseEstimator):
    def __init__(self, n_layers=4, hidden=32, ffn=64, vocab=32, seq=16, batch=4, ckpt_interval=1,
                 tie_embeddings=False, steps=200, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, random_state=0):
        self.n_layers = n_layers
        self.hidden = hidden
        self.ffn = ffn
        self.vocab = vocab
        self.seq = seq
        self.batch = batch
        self.ckpt_interval = ckpt_interval
        self.tie_embeddings = tie_embeddings
        self.steps = steps
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(self.n_layers, self.hidden, self.ffn, self.vocab, seq=self.seq, batch=self.batch,
                           ckpt_interval=self.ckpt_interval, tie_embeddings=self.tie_embeddings)

    def _hyper(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def _draw(self, X, y, step):
        rng = np.random.default_rng([self.random_state, step])
        rows = rng.choice(X.shape[0], size=self.batch, replace=X.shape[0] < self.batch)
        return X[rows], y[rows]

    def _params(self) -> dict:
        raise NotImplementedError

    def predict_proba(self, X) -> np.ndarray:
        """Next-token distribution at every position, shape ``(n, seq, vocab)``."""
        check_is_fitted(self, "loss_curve_")
        X = check_tokens(X, self.vocab, self.seq)
        return _softmax(_forward_logits(self._params(), X, self.config_))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=-1)

    def score(self, X, y=None) -> float:
        """Token accuracy of :meth:`predict` against ``y`` (``X`` for the copy task)."""
        check_is_fitted(self, "loss_curve_")
        X, y = check_pair(X, y, self.vocab, self.seq)
        return float(np.mean(self.predict(X) == y))


class StreamingTrainer(_TokenModelBase):
    """Token model trained by block-wise streaming through a bounded device arena.

    Host state lives in ``store_`` and ``engine_``; ``loss_curve_`` holds the
    per-step loss and ``ledger_`` the device ledger of the last step.
    """

    def __init__(self, n_layers=4, hidden=32, ffn=64, vocab=32, seq=16, batch=4, ckpt_interval=1,
                 tie_embeddings=False, steps=200, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, random_state=0, storage="bf16", n_slabs=12, accumulation="inline",
                 eager_optim=False):
        super().__init__(n_layers, hidden, ffn, vocab, seq, batch, ckpt_interval, tie_embeddings, steps,
                         lr, beta1, beta2, eps, weight_decay, random_state)
        self.storage = storage
        self.n_slabs = n_slabs
        self.accumulation = accumulation
        self.eager_optim = eager_optim

    def _init_state(self):
        self.config_ = self._model_config()
        self.store_ = build_store(self.config_, self.random_state, self.storage)
        self.engine_ = StreamingEngine(self.store_, self.config_, self._hyper(), n_slabs=self.n_slabs,
                                       accumulation=self.accumulation, eager_optim=self.eager_optim)
        self.loss_curve_ = []

    def fit(self, X, y=None):
        X, y = check_pair(X, y, self.vocab, self.seq)
        self._init_state()
        try:
            for step in range(1, self.steps + 1):
                self._step(*self._draw(X, y, step))
        finally:
            self.engine_.close()
        return self

    def partial_fit(self, X, y=None):
        """One optimizer step on exactly ``batch`` rows."""
        X, y = check_pair(X, y, self.vocab, self.seq)
        if X.shape[0] != self.batch:
            raise ValueError(f"partial_fit takes exactly batch={self.batch} rows, got {X.shape[0]}")
        if not hasattr(self, "store_"):
            self._init_state()
        self._step(X, y)
        return self

    def _step(self, tokens, targets):
        result = self.engine_.train_step(tokens, targets)
        self.loss_curve_.append(result.loss)
        self.ledger_ = result.ledger
        self.last_step_ = result

    def _params(self) -> dict:
        return self.store_.params_dict()


class ReferenceTrainer(_TokenModelBase):
    """Same model trained by the full-graph reference implementation in FP32."""

    def fit(self, X, y=None):
        X, y = check_pair(X, y, self.vocab, self.seq)
        self.config_ = self._model_config()
        self.params_ = build_store(self.config_, self.random_state, "fp32").params_dict()
        self.loss_curve_ = []
        state: dict = {}
        hyper = self._hyper()
        for step in range(1, self.steps + 1):
            tokens, targets = self._draw(X, y, step)
            loss, grads = oracle_forward_backward(self.params_, tokens, targets, self.config_)
            self.loss_curve_.append(loss)
            _adam(self.params_, grads, state, hyper, step)
        return self

    def _params(self) -> dict:
        return self.params_
