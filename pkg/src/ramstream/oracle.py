"""Reference trainer: a naive full-graph reverse-mode implementation of the same model.

The tape records every primitive as it runs and keeps all activations alive;
backward walks the tape in reverse creation order. Composite operations
(softmax, RMSNorm, attention, cross-entropy) are built from primitives here, so
their gradients come from the primitive rules rather than from the
hand-derived kernels in :mod:`ramstream.numerics`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .config import AdamConfig, ModelConfig
from .numerics import RMS_EPS, block_layout


class Var:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad=False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape


@dataclass
class TapeNode:
    op_id: int
    op: str
    inputs: tuple
    out: Var
    backward: Callable


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    def __init__(self):
        self.nodes: list[TapeNode] = []

    def leaf(self, value, requires_grad=True) -> Var:
        return Var(np.asarray(value), requires_grad)

    def const(self, value) -> Var:
        return Var(np.asarray(value), False)

    def _record(self, op, inputs, value, backward) -> Var:
        out = Var(value, any(v.requires_grad for v in inputs))
        if out.requires_grad:
            self.nodes.append(TapeNode(len(self.nodes), op, tuple(inputs), out, backward))
        return out

    # -- primitives ----------------------------------------------------------

    def add(self, a, b):
        return self._record("add", (a, b), a.value + b.value,
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a, b):
        return self._record("sub", (a, b), a.value - b.value,
                            lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))

    def mul(self, a, b):
        return self._record("mul", (a, b), a.value * b.value,
                            lambda g: (_unbroadcast(g * b.value, a.shape),
                                       _unbroadcast(g * a.value, b.shape)))

    def div(self, a, b):
        out = a.value / b.value
        return self._record("div", (a, b), out,
                            lambda g: (_unbroadcast(g / b.value, a.shape),
                                       _unbroadcast(-g * out / b.value, b.shape)))

    def scale(self, a, c):
        c = a.value.dtype.type(c)
        return self._record("scale", (a,), a.value * c, lambda g: (g * c,))

    def add_const(self, a, c):
        return self._record("add_const", (a,), a.value + a.value.dtype.type(c), lambda g: (g,))

    def matmul(self, a, b):
        def back(g):
            ga = g @ np.swapaxes(b.value, -1, -2)
            gb = np.swapaxes(a.value, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        return self._record("matmul", (a, b), a.value @ b.value, back)

    def transpose(self, a):
        return self._record("transpose", (a,), np.swapaxes(a.value, -1, -2),
                            lambda g: (np.swapaxes(g, -1, -2),))

    def exp(self, a):
        out = np.exp(a.value)
        return self._record("exp", (a,), out, lambda g: (g * out,))

    def log(self, a):
        return self._record("log", (a,), np.log(a.value), lambda g: (g / a.value,))

    def rsqrt(self, a):
        out = 1.0 / np.sqrt(a.value)
        return self._record("rsqrt", (a,), out, lambda g: (g * (-0.5) * out / a.value,))

    def sigmoid(self, a):
        out = 1.0 / (1.0 + np.exp(-a.value))
        return self._record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))

    def sum(self, a, axis, keepdims=True):
        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)
        return self._record("sum", (a,), a.value.sum(axis=axis, keepdims=keepdims), back)

    def mean_all(self, a):
        n = a.value.size
        return self._record("mean_all", (a,), a.value.sum() / a.value.dtype.type(n),
                            lambda g: (np.full(a.shape, g / n, dtype=a.value.dtype),))

    def gather_rows(self, table, idx):
        def back(g):
            d = np.zeros_like(table.value)
            np.add.at(d, idx.ravel(), g.reshape(-1, g.shape[-1]))
            return (d,)
        return self._record("gather_rows", (table,), table.value[idx], back)

    def pick(self, a, idx):
        """``a[..., idx]`` along the last axis, one index per row."""
        def back(g):
            d = np.zeros_like(a.value)
            np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
            return (d,)
        return self._record("pick", (a,), np.take_along_axis(a.value, idx[..., None], -1)[..., 0], back)

    def mask_fill(self, a, keep, fill):
        return self._record("mask_fill", (a,), np.where(keep, a.value, fill),
                            lambda g: (np.where(keep, g, 0),))

    # -- reverse sweep -------------------------------------------------------

    def backward(self, out: Var, seed=1.0):
        """Propagate from ``out``; ``seed`` is a scalar or an array cotangent."""
        out.grad = np.broadcast_to(np.asarray(seed, dtype=out.value.dtype), out.shape).copy()
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if not inp.requires_grad:
                    continue
                gi = gi.astype(inp.value.dtype, copy=False)
                inp.grad = gi if inp.grad is None else inp.grad + gi


# ---------------------------------------------------------------------------
# Model composition
# ---------------------------------------------------------------------------

def _rmsnorm(t: Tape, x, scale):
    ms = t.scale(t.sum(t.mul(x, x), axis=-1), 1.0 / x.shape[-1])
    return t.mul(t.mul(x, t.rsqrt(t.add_const(ms, RMS_EPS))), scale)


def _softmax(t: Tape, s):
    shift = t.const(s.value.max(axis=-1, keepdims=True))
    e = t.exp(t.sub(s, shift))
    return t.div(e, t.sum(e, axis=-1))


def block_graph(t: Tape, x, p: dict):
    """One transformer block built from tape primitives. ``p`` maps names to Vars."""
    h = x.shape[-1]
    seq = x.shape[-2]
    xn = _rmsnorm(t, x, p["attn_norm"])
    q, k, v = t.matmul(xn, p["wq"]), t.matmul(xn, p["wk"]), t.matmul(xn, p["wv"])
    s = t.scale(t.matmul(q, t.transpose(k)), 1.0 / np.sqrt(h))
    s = t.mask_fill(s, np.tril(np.ones((seq, seq), bool)), -np.inf)
    a = t.matmul(t.matmul(_softmax(t, s), v), p["wo"])
    h_mid = t.add(x, a)
    xn2 = _rmsnorm(t, h_mid, p["mlp_norm"])
    gate = t.matmul(xn2, p["w_gate"])
    z = t.mul(t.matmul(xn2, p["w_up"]), t.mul(gate, t.sigmoid(gate)))
    return t.add(h_mid, t.matmul(z, p["w_down"]))


def _cross_entropy(t: Tape, logits, targets):
    shift = t.const(logits.value.max(axis=-1, keepdims=True))
    sh = t.sub(logits, shift)
    logp = t.sub(sh, t.log(t.sum(t.exp(sh), axis=-1)))
    return t.scale(t.mean_all(t.pick(logp, targets)), -1.0)


def param_names(config: ModelConfig) -> list[str]:
    names = ["embed"]
    for i in range(1, config.n_layers + 1):
        names += [f"block.{i}.{n}" for n, _ in block_layout(config.hidden, config.ffn)]
    if not config.tie_embeddings:
        names.append("head")
    return names


def init_params(config: ModelConfig, seed=0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Small random parameters for tests that do not go through a store."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in param_names(config):
        if name in ("embed", "head"):
            shape = (config.vocab, config.hidden)
        else:
            short = name.split(".")[-1]
            shape = dict(block_layout(config.hidden, config.ffn))[short]
        if name.endswith("norm"):
            out[name] = (1.0 + 0.1 * rng.standard_normal(shape)).astype(dtype)
        else:
            out[name] = (0.3 * rng.standard_normal(shape)).astype(dtype)
    return out


def oracle_forward_backward(params: dict, tokens, targets, config: ModelConfig,
                            seed=1.0, dtype=np.float32):
    """Full-graph loss and gradients. ``seed`` scales the loss cotangent."""
    tokens = np.asarray(tokens)
    targets = np.asarray(targets)
    if tokens.min() < 0 or tokens.max() >= config.vocab or targets.min() < 0 or targets.max() >= config.vocab:
        raise ValueError("token id out of range")
    t = Tape()
    leaves = {k: t.leaf(np.asarray(v, dtype=dtype)) for k, v in params.items()}
    x = t.gather_rows(leaves["embed"], tokens)
    for i in range(1, config.n_layers + 1):
        prefix = f"block.{i}."
        x = block_graph(t, x, {k[len(prefix):]: v for k, v in leaves.items() if k.startswith(prefix)})
    w_head = leaves["embed"] if config.tie_embeddings else leaves["head"]
    logits = t.matmul(x, t.transpose(w_head))
    loss = _cross_entropy(t, logits, targets)
    t.backward(loss, seed=seed)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in leaves.items()}
    return float(loss.value), grads


def oracle_block(h_in, theta: dict, g_out):
    """Forward output and gradients of one block via the tape."""
    t = Tape()
    x = t.leaf(h_in)
    p = {k: t.leaf(v) for k, v in theta.items()}
    out = block_graph(t, x, p)
    t.backward(out, seed=g_out)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in p.items()}
    g_in = x.grad if x.grad is not None else np.zeros_like(h_in)
    return out.value, g_in, grads


def _adam(params, grads, state, hyper: AdamConfig, step):
    b1, b2 = np.float32(hyper.beta1), np.float32(hyper.beta2)
    bc1 = np.float32(1.0 - hyper.beta1 ** step)
    bc2 = np.float32(1.0 - hyper.beta2 ** step)
    for k, g in grads.items():
        g = g.astype(np.float32)
        m, v = state.setdefault(k, (np.zeros_like(g), np.zeros_like(g)))
        m = b1 * m + (np.float32(1) - b1) * g
        v = b2 * v + (np.float32(1) - b2) * g * g
        state[k] = (m, v)
        update = (m / bc1) / (np.sqrt(v / bc2) + np.float32(hyper.eps))
        theta = params[k]
        params[k] = theta - np.float32(hyper.lr) * (update + np.float32(hyper.weight_decay) * theta)


def oracle_train(params: dict, data: Iterable, hyper: AdamConfig, steps: int,
                 config: ModelConfig) -> tuple[list[float], dict]:
    """Plain full-graph training loop; returns the loss curve and final parameters."""
    params = {k: np.array(v, dtype=np.float32) for k, v in params.items()}
    state: dict = {}
    curve = []
    for step, (tokens, targets) in zip(range(1, steps + 1), data):
        loss, grads = oracle_forward_backward(params, tokens, targets, config)
        curve.append(loss)
        _adam(params, grads, state, hyper, step)
    return curve, params
