"""BF16 emulation and transformer-block kernels with hand-written backward rules.

Everything here is a pure function of its arguments. Kernels compute in the
floating dtype of their activation input (float32 in the engine); weights
stored as BF16 bit patterns (``uint16``) are widened on load.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

RMS_EPS = 1e-6


# ---------------------------------------------------------------------------
# BF16 emulation
# ---------------------------------------------------------------------------

def bf16_bits(x) -> np.ndarray:
    """Round float32 values to the nearest BF16 (ties to even); return the uint16 bit patterns."""
    x = np.asarray(x, dtype=np.float32)
    bits = x.view(np.uint32)
    # 0x7FFF plus the lsb of the kept half gives round-half-to-even on the dropped 16 bits
    rounded = (bits + np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))) >> np.uint32(16)
    out = rounded.astype(np.uint16)
    nan = np.isnan(x)
    if np.any(nan):
        # keep sign and force a quiet-NaN payload so truncation cannot produce inf
        out = np.where(nan, ((bits >> np.uint32(16)) | np.uint32(0x0040)).astype(np.uint16), out)
    return out


def bf16_widen(bits) -> np.ndarray:
    """Exact BF16 -> float32 conversion of uint16 bit patterns."""
    bits = np.asarray(bits, dtype=np.uint16)
    return (bits.astype(np.uint32) << np.uint32(16)).view(np.float32)


def bf16_round(x) -> np.ndarray:
    """Nearest BF16 value of ``x``, returned as float32."""
    return bf16_widen(bf16_bits(x))


def widen(arr, dtype=np.float32) -> np.ndarray:
    """Load a stored tensor into compute precision (BF16 bit patterns are widened)."""
    arr = np.asarray(arr)
    if arr.dtype == np.uint16:
        return bf16_widen(arr).astype(dtype, copy=False)
    return arr.astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# Parameter and activation containers
# ---------------------------------------------------------------------------

def block_layout(hidden: int, ffn: int) -> list[tuple[str, tuple[int, ...]]]:
    """Named tensor shapes of one block, in flat storage order."""
    h, f = hidden, ffn
    return [
        ("attn_norm", (h,)),
        ("wq", (h, h)),
        ("wk", (h, h)),
        ("wv", (h, h)),
        ("wo", (h, h)),
        ("mlp_norm", (h,)),
        ("w_up", (h, f)),
        ("w_gate", (h, f)),
        ("w_down", (f, h)),
    ]


@dataclass
class BlockParams:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray
    w_up: np.ndarray
    w_gate: np.ndarray
    w_down: np.ndarray

    @property
    def hidden(self) -> int:
        return self.wq.shape[0]

    @property
    def ffn(self) -> int:
        return self.w_up.shape[1]

    @property
    def numel(self) -> int:
        return sum(getattr(self, f_.name).size for f_ in fields(self))

    def tensors(self) -> dict[str, np.ndarray]:
        return {f_.name: getattr(self, f_.name) for f_ in fields(self)}

    @classmethod
    def from_flat(cls, flat: np.ndarray, hidden: int, ffn: int) -> "BlockParams":
        """Zero-copy views over a flat buffer laid out by :func:`block_layout`."""
        out, offset = {}, 0
        for name, shape in block_layout(hidden, ffn):
            n = int(np.prod(shape))
            out[name] = flat[offset:offset + n].reshape(shape)
            offset += n
        if offset != flat.size:
            raise ValueError(f"flat buffer holds {flat.size} elements, layout needs {offset}")
        return cls(**out)

    @classmethod
    def zeros(cls, hidden: int, ffn: int, dtype=np.float32) -> "BlockParams":
        return cls(**{name: np.zeros(shape, dtype) for name, shape in block_layout(hidden, ffn)})

    def widened(self, dtype=np.float32) -> "BlockParams":
        return BlockParams(**{k: widen(v, dtype) for k, v in self.tensors().items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors().values()])


@dataclass
class BlockActivations:
    """Exactly the intermediates :func:`block_local_backward` consumes."""

    x: np.ndarray        # block input h_{i-1}
    rstd1: np.ndarray
    xn1: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    ctx: np.ndarray
    h_mid: np.ndarray
    rstd2: np.ndarray
    xn2: np.ndarray
    up: np.ndarray
    gate: np.ndarray

    @property
    def nbytes(self) -> int:
        return sum(getattr(self, f_.name).nbytes for f_ in fields(self))


def activation_bytes(batch: int, seq: int, hidden: int, ffn: int, itemsize: int = 4) -> int:
    """Bytes of one block's saved activations (A_max for uniform blocks)."""
    return itemsize * batch * seq * (8 * hidden + 2 * ffn + seq + 2)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def rmsnorm_forward(x, scale, eps=RMS_EPS):
    rstd = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + x.dtype.type(eps))
    return x * rstd * scale, rstd


def rmsnorm_backward(g_y, x, rstd, scale):
    x_hat = x * rstd
    g_scale = np.sum(g_y * x_hat, axis=tuple(range(g_y.ndim - 1)))
    g_hat = g_y * scale
    g_x = rstd * (g_hat - x_hat * np.mean(g_hat * x_hat, axis=-1, keepdims=True))
    return g_x, g_scale


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _causal_mask(seq: int) -> np.ndarray:
    return np.tril(np.ones((seq, seq), dtype=bool))


def _check_block_input(h_in, theta: BlockParams):
    if h_in.ndim != 3 or h_in.shape[-1] != theta.hidden:
        raise ValueError(f"h_in shape {h_in.shape} incompatible with hidden size {theta.hidden}")


def block_forward(h_in: np.ndarray, theta: BlockParams) -> tuple[np.ndarray, BlockActivations]:
    """Pre-norm causal single-head attention and SiLU-gated MLP, both residual."""
    _check_block_input(h_in, theta)
    dt = h_in.dtype
    p = theta.widened(dt)
    h = p.hidden
    seq = h_in.shape[1]

    xn1, rstd1 = rmsnorm_forward(h_in, p.attn_norm)
    q, k, v = xn1 @ p.wq, xn1 @ p.wk, xn1 @ p.wv
    scores = (q @ np.swapaxes(k, -1, -2)) * dt.type(1.0 / np.sqrt(h))
    scores = np.where(_causal_mask(seq), scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = probs @ v
    h_mid = h_in + ctx @ p.wo

    xn2, rstd2 = rmsnorm_forward(h_mid, p.mlp_norm)
    up, gate = xn2 @ p.w_up, xn2 @ p.w_gate
    z = up * (gate * _sigmoid(gate))
    out = h_mid + z @ p.w_down

    acts = BlockActivations(x=h_in, rstd1=rstd1, xn1=xn1, q=q, k=k, v=v, probs=probs, ctx=ctx,
                            h_mid=h_mid, rstd2=rstd2, xn2=xn2, up=up, gate=gate)
    return out, acts


def _mm_grad_w(a, g):
    """Weight gradient of ``a @ W`` summed over all leading (batch, seq) axes."""
    return a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def block_local_backward(h_in, acts: BlockActivations, g_out, theta: BlockParams):
    """Reverse-mode gradients of one block w.r.t. its input and its parameters."""
    _check_block_input(h_in, theta)
    if acts.x.shape != h_in.shape or g_out.shape != h_in.shape:
        raise ValueError(
            f"stale activations: acts {acts.x.shape}, h_in {h_in.shape}, g_out {g_out.shape}"
        )
    if acts.up.shape[-1] != theta.ffn:
        raise ValueError("stale activations: ffn width does not match parameters")
    dt = g_out.dtype
    p = theta.widened(dt)
    h = p.hidden

    # gated MLP
    sig = _sigmoid(acts.gate)
    silu = acts.gate * sig
    z = acts.up * silu
    d_down = _mm_grad_w(z, g_out)
    g_z = g_out @ p.w_down.T
    g_up = g_z * silu
    g_gate = g_z * acts.up * (sig * (1.0 + acts.gate * (1.0 - sig)))
    d_up = _mm_grad_w(acts.xn2, g_up)
    d_gate = _mm_grad_w(acts.xn2, g_gate)
    g_xn2 = g_up @ p.w_up.T + g_gate @ p.w_gate.T
    g_hmid, d_mlp_norm = rmsnorm_backward(g_xn2, acts.h_mid, acts.rstd2, p.mlp_norm)
    g_hmid = g_hmid + g_out

    # attention
    d_wo = _mm_grad_w(acts.ctx, g_hmid)
    g_ctx = g_hmid @ p.wo.T
    g_probs = g_ctx @ np.swapaxes(acts.v, -1, -2)
    g_v = np.swapaxes(acts.probs, -1, -2) @ g_ctx
    g_scores = acts.probs * (g_probs - np.sum(g_probs * acts.probs, axis=-1, keepdims=True))
    g_scores = g_scores * dt.type(1.0 / np.sqrt(h))
    g_q = g_scores @ acts.k
    g_k = np.swapaxes(g_scores, -1, -2) @ acts.q
    d_wq = _mm_grad_w(acts.xn1, g_q)
    d_wk = _mm_grad_w(acts.xn1, g_k)
    d_wv = _mm_grad_w(acts.xn1, g_v)
    g_xn1 = g_q @ p.wq.T + g_k @ p.wk.T + g_v @ p.wv.T
    g_x, d_attn_norm = rmsnorm_backward(g_xn1, acts.x, acts.rstd1, p.attn_norm)
    g_in = g_x + g_hmid

    grads = BlockParams(attn_norm=d_attn_norm, wq=d_wq, wk=d_wk, wv=d_wv, wo=d_wo,
                        mlp_norm=d_mlp_norm, w_up=d_up, w_gate=d_gate, w_down=d_down)
    return g_in, grads


def _check_tokens(tokens, vocab: int):
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ValueError(f"token id out of range [0, {vocab})")
    return tokens


def embed_forward(tokens, table, dtype=np.float32) -> np.ndarray:
    tokens = _check_tokens(tokens, table.shape[0])
    return widen(table, dtype)[tokens]


def embed_backward(tokens, g_h, vocab: int) -> np.ndarray:
    """Scatter-add token gradients into a (vocab x hidden) table gradient."""
    tokens = _check_tokens(tokens, vocab)
    d_table = np.zeros((vocab, g_h.shape[-1]), dtype=g_h.dtype)
    np.add.at(d_table, tokens.ravel(), g_h.reshape(-1, g_h.shape[-1]))
    return d_table


def head_forward(h, w_head) -> np.ndarray:
    return h @ widen(w_head, h.dtype).T


def head_backward(h, w_head, g_logits):
    g_h = g_logits @ widen(w_head, h.dtype)
    d_head = _mm_grad_w(g_logits, h)
    return g_h, d_head


def loss_and_grad(logits, targets):
    """Mean token cross-entropy and its gradient w.r.t. the logits."""
    targets = _check_tokens(targets, logits.shape[-1])
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    sum_e = e.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(sum_e)
    n = targets.size
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    loss = -picked.sum() / n
    g = e / sum_e
    np.put_along_axis(g, targets[..., None], np.take_along_axis(g, targets[..., None], -1) - 1, -1)
    return float(loss), g / logits.dtype.type(n)
