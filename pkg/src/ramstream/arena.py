"""Simulated device memory: a byte-budgeted arena with fixed regions.

Regions are sized once at construction and never grow:

* ``stream_buf[0]`` / ``stream_buf[1]``: one widest block's weights each
* ``activation_stack``: K_ckpt blocks of saved activations
* ``ckpt_anchors``: one hidden state per anchor layer
* ``workspace.carry``: the rolling pair of hidden states / activation gradients
* ``workspace.edge``: embedding or head weights, later their gradients
* ``workspace.logits``: logits and their gradient

Every claim and release passes through :class:`Ledger`, which keeps an event
log so peaks can be recomputed independently by replay.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .config import STORAGE_BYTES, ModelConfig
from .host_store import StagingBuffer, aligned_empty
from .numerics import BlockActivations, BlockParams, activation_bytes

STREAM_BUFS = ("stream_buf[0]", "stream_buf[1]")
EDGE = 2  # buffer index used for the embedding/head slot in traces


class ArenaOOM(MemoryError):
    """A claim or construction exceeded a region's (or the device's) byte budget."""

    def __init__(self, region: str, requested: int, available: int):
        super().__init__(f"device arena out of memory in {region}: "
                         f"requested {requested} bytes, {available} available")
        self.region = region
        self.requested = requested
        self.available = available


class ArenaProtocolError(RuntimeError):
    """Misuse of buffers, templates, the stack or anchors."""


def region_capacities(config: ModelConfig, storage: str) -> dict[str, int]:
    w_item = STORAGE_BYTES[storage][0]
    B, S, h, f, V = config.batch, config.seq, config.hidden, config.ffn, config.vocab
    p_max = w_item * config.block_params
    a_max = activation_bytes(B, S, h, f)
    a_ckpt = 4 * B * S * h
    return {
        STREAM_BUFS[0]: p_max,
        STREAM_BUFS[1]: p_max,
        "activation_stack": config.ckpt_interval * a_max,
        "ckpt_anchors": config.n_anchors * a_ckpt,
        "workspace.carry": 2 * a_ckpt,
        "workspace.edge": w_item * V * h,
        "workspace.logits": 2 * 4 * B * S * V,
    }


@dataclass
class LedgerEvent:
    seq: int
    region: str
    delta: int
    current: int
    label: str


class Ledger:
    def __init__(self, capacities: dict[str, int]):
        self.capacity = dict(capacities)
        self.current = {r: 0 for r in capacities}
        self.peak = {r: 0 for r in capacities}
        self.total = 0
        self.peak_total = 0
        self.events: list[LedgerEvent] = []

    def claim(self, region: str, nbytes: int, label: str = ""):
        free = self.capacity[region] - self.current[region]
        if nbytes > free:
            raise ArenaOOM(region, nbytes, free)
        self._apply(region, nbytes, label)

    def release(self, region: str, nbytes: int, label: str = ""):
        if nbytes > self.current[region]:
            raise ArenaProtocolError(f"release of {nbytes} bytes from {region} holding {self.current[region]}")
        self._apply(region, -nbytes, label)

    def _apply(self, region, delta, label):
        self.current[region] += delta
        self.total += delta
        self.peak[region] = max(self.peak[region], self.current[region])
        self.peak_total = max(self.peak_total, self.total)
        self.events.append(LedgerEvent(len(self.events), region, delta, self.current[region], label))

    def reset_peaks(self):
        self.peak = dict(self.current)
        self.peak_total = self.total

    def snapshot(self) -> dict:
        return {
            "current": dict(self.current),
            "peak": dict(self.peak),
            "peak_sum": sum(self.peak.values()),
            "peak_instant": self.peak_total,
        }


def replay_peaks(events: list[LedgerEvent]) -> tuple[dict[str, int], int]:
    """Recompute per-region and instantaneous peaks from an event log alone."""
    cur: dict[str, int] = {}
    peak: dict[str, int] = {}
    total = peak_total = 0
    for ev in events:
        cur[ev.region] = cur.get(ev.region, 0) + ev.delta
        total += ev.delta
        peak[ev.region] = max(peak.get(ev.region, 0), cur[ev.region])
        peak_total = max(peak_total, total)
    return peak, peak_total


@dataclass
class BoundBuffer:
    """Handle for a stream buffer holding one unit's weights."""

    buf: int
    unit: int
    gen: int
    nbytes: int


class TemplateState(enum.Enum):
    UNBOUND = "UNBOUND"
    BOUND = "BOUND"


@dataclass
class LayerTemplate:
    """Block kernels with parameter slots; weights are only ever views into a stream buffer."""

    name: str
    state: TemplateState = TemplateState.UNBOUND
    layer_id: int | None = None
    bound_views: BlockParams | None = None


class DeviceArena:
    def __init__(self, config: ModelConfig, storage: str, device_bytes: float | None = None):
        self.config = config
        self.storage = storage
        caps = region_capacities(config, storage)
        if device_bytes is not None:
            used = 0
            for region, cap in caps.items():
                if used + cap > device_bytes:
                    raise ArenaOOM(region, cap, max(int(device_bytes) - used, 0))
                used += cap
        self.ledger = Ledger(caps)
        self.budget = sum(caps.values())
        self._wdtype = np.uint16 if STORAGE_BYTES[storage][0] == 2 else np.float32
        self.stream_buf = [aligned_empty(caps[r]) for r in STREAM_BUFS]
        self.edge_buf = aligned_empty(caps["workspace.edge"])
        self._buf_state: list[BoundBuffer | None] = [None, None]
        self.templates = (LayerTemplate("A"), LayerTemplate("B"))
        self._stack: list[tuple[int, BlockActivations]] = []
        self._anchors: dict[int, np.ndarray] = {}
        self.device_copies = 0

    # -- regions --------------------------------------------------------------

    @property
    def capacities(self) -> dict[str, int]:
        return dict(self.ledger.capacity)

    @property
    def a_ckpt(self) -> int:
        return 4 * self.config.batch * self.config.seq * self.config.hidden

    def claim(self, region, nbytes, label=""):
        self.ledger.claim(region, nbytes, label)

    def release(self, region, nbytes, label=""):
        self.ledger.release(region, nbytes, label)

    # -- weight streaming ------------------------------------------------------

    def stream_in(self, buf_idx: int, staged: StagingBuffer, gen: int = 0) -> BoundBuffer:
        """Single contiguous copy of a staged payload into ``stream_buf[buf_idx]``."""
        if self._buf_state[buf_idx] is not None:
            raise ArenaProtocolError(f"{STREAM_BUFS[buf_idx]} is busy with unit {self._buf_state[buf_idx].unit}")
        n = staged.nbytes
        self.claim(STREAM_BUFS[buf_idx], n, f"stream_in unit {staged.occupant}")
        np.copyto(self.stream_buf[buf_idx][:n], staged.payload[:n])
        self.device_copies += 1
        handle = BoundBuffer(buf_idx, staged.occupant, gen, n)
        self._buf_state[buf_idx] = handle
        return handle

    def buffer_view(self, handle: BoundBuffer, dtype=None) -> np.ndarray:
        raw = self.stream_buf[handle.buf][:handle.nbytes]
        return raw.view(dtype or self._wdtype)

    def free_buffer(self, handle: BoundBuffer):
        if self._buf_state[handle.buf] is not handle:
            raise ArenaProtocolError(f"{STREAM_BUFS[handle.buf]} released twice or by a stale handle")
        self.release(STREAM_BUFS[handle.buf], handle.nbytes, f"free unit {handle.unit}")
        self._buf_state[handle.buf] = None

    def bind(self, template: LayerTemplate, handle: BoundBuffer):
        if template.state is not TemplateState.UNBOUND:
            raise ArenaProtocolError(f"template {template.name} already bound to layer {template.layer_id}")
        if self._buf_state[handle.buf] is not handle:
            raise ArenaProtocolError(f"bind from {STREAM_BUFS[handle.buf]} without a live stream-in")
        flat = self.buffer_view(handle)
        template.bound_views = BlockParams.from_flat(flat, self.config.hidden, self.config.ffn)
        template.layer_id = handle.unit
        template.state = TemplateState.BOUND

    def unbind(self, template: LayerTemplate):
        if template.state is not TemplateState.BOUND:
            raise ArenaProtocolError(f"template {template.name} released while unbound")
        template.bound_views = None
        template.layer_id = None
        template.state = TemplateState.UNBOUND

    # -- activation stack and anchors -------------------------------------------

    def push_activation(self, layer: int, acts: BlockActivations):
        self.claim("activation_stack", acts.nbytes, f"push {layer}")
        self._stack.append((layer, acts))

    def pop_activation(self, layer: int | None = None) -> BlockActivations:
        if not self._stack:
            raise ArenaProtocolError("pop from an empty activation stack")
        top, acts = self._stack[-1]
        if layer is not None and top != layer:
            raise ArenaProtocolError(f"LIFO violation: popping layer {layer}, top of stack is {top}")
        self._stack.pop()
        self.release("activation_stack", acts.nbytes, f"pop {top}")
        return acts

    @property
    def stack_depth(self) -> int:
        return len(self._stack)

    def anchor_checkpoint(self, i: int, h: np.ndarray):
        if i in self._anchors:
            raise ArenaProtocolError(f"anchor {i} already held")
        self.claim("ckpt_anchors", h.nbytes, f"anchor {i}")
        self._anchors[i] = h.copy()

    def load_checkpoint(self, i: int) -> np.ndarray:
        if i not in self._anchors:
            raise ArenaProtocolError(f"no checkpoint anchored at layer {i}")
        return self._anchors[i]

    def drop_anchor(self, i: int):
        h = self._anchors.pop(i, None)
        if h is None:
            raise ArenaProtocolError(f"no checkpoint anchored at layer {i}")
        self.release("ckpt_anchors", h.nbytes, f"drop anchor {i}")

    @property
    def anchors(self) -> list[int]:
        return sorted(self._anchors)

    def is_idle(self) -> bool:
        return all(v == 0 for v in self.ledger.current.values())
