"""Authoritative host-side parameter store.

Each layer owns one contiguous, page-aligned tile laid out as
``[weights | grads | moment_m | moment_v]``. Gradients arrive through a
fixed pool of slabs and are folded into the tiles by :func:`accumulate_slab`;
:func:`adam_step` updates the tiles in place.

Unit ids used throughout the package: 0 is the embedding, 1..L are the
transformer blocks and L+1 is the LM head. With tied embeddings the head is an
alias of the embedding tile.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .config import BF16, STORAGE_BYTES, AdamConfig, ModelConfig
from .numerics import bf16_bits, bf16_widen, block_layout

ALIGN = 4096
DEFAULT_SLABS = 12


class StoreError(RuntimeError):
    """Host-store construction or capacity error."""


class SlabProtocolError(RuntimeError):
    """Illegal gradient-slab state transition."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, unit_name: str):
        super().__init__(f"non-finite gradient in {unit_name}; optimizer step aborted")
        self.unit_name = unit_name


def aligned_empty(nbytes: int, align: int = ALIGN) -> np.ndarray:
    """Uninitialised uint8 buffer whose first byte sits on an ``align`` boundary."""
    raw = np.empty(nbytes + align, dtype=np.uint8)
    shift = (-raw.ctypes.data) % align
    return raw[shift:shift + nbytes]


def _weight_dtype(storage: str):
    return np.uint16 if storage == BF16 else np.float32


def store_values(values: np.ndarray, storage: str) -> np.ndarray:
    """Convert float32 values into the storage representation (round on store)."""
    if storage == BF16:
        return bf16_bits(values)
    return np.asarray(values, dtype=np.float32)


def load_values(stored: np.ndarray) -> np.ndarray:
    """Widen stored values to float32 (widen on load)."""
    if stored.dtype == np.uint16:
        return bf16_widen(stored)
    return stored


def unit_layout(config: ModelConfig, unit: int) -> list[tuple[str, tuple[int, ...]]]:
    if unit == 0:
        return [("embed", (config.vocab, config.hidden))]
    if unit == config.n_layers + 1:
        return [("head", (config.vocab, config.hidden))]
    if 1 <= unit <= config.n_layers:
        return block_layout(config.hidden, config.ffn)
    raise KeyError(f"no unit {unit} in a {config.n_layers}-layer model")


def unit_name(config: ModelConfig, unit: int) -> str:
    if unit == 0:
        return "embed"
    if unit == config.n_layers + 1:
        return "head"
    return f"block.{unit}"


@dataclass
class LayerTile:
    """One layer's contiguous block of weights, gradients and Adam moments."""

    layer_id: int
    name: str
    numel: int
    storage: str
    buffer: np.ndarray
    offset_table: dict[str, tuple[int, tuple[int, ...]]]

    @property
    def nbytes(self) -> int:
        return self.buffer.nbytes

    def _region(self, index: int, dtype) -> np.ndarray:
        sizes = STORAGE_BYTES[self.storage]
        start = sum(sizes[:index]) * self.numel
        stop = start + sizes[index] * self.numel
        return self.buffer[start:stop].view(dtype)

    @property
    def weights(self) -> np.ndarray:
        return self._region(0, _weight_dtype(self.storage))

    @property
    def grads(self) -> np.ndarray:
        return self._region(1, _weight_dtype(self.storage))

    @property
    def moment_m(self) -> np.ndarray:
        return self._region(2, np.float32)

    @property
    def moment_v(self) -> np.ndarray:
        return self._region(3, np.float32)

    @property
    def weight_nbytes(self) -> int:
        return STORAGE_BYTES[self.storage][0] * self.numel

    @property
    def grad_nbytes(self) -> int:
        return STORAGE_BYTES[self.storage][1] * self.numel

    def weight_bytes(self) -> np.ndarray:
        return self.buffer[:self.weight_nbytes]

    def tensor(self, name: str, region: str = "weights") -> np.ndarray:
        offset, shape = self.offset_table[name]
        flat = getattr(self, region)
        return flat[offset:offset + int(np.prod(shape))].reshape(shape)


def _offset_table(layout) -> dict[str, tuple[int, tuple[int, ...]]]:
    table, offset = {}, 0
    for name, shape in layout:
        table[name] = (offset, tuple(shape))
        offset += int(np.prod(shape))
    return table


def _trunc_normal(rng, shape, std=0.02, bound=2.0):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(np.float32)


@dataclass
class MasterStore:
    config: ModelConfig
    storage: str
    tiles: list[LayerTile]
    alias_map: dict[int, int]
    step: int = 0
    copies: Counter = field(default_factory=Counter)

    @property
    def n_units(self) -> int:
        return self.config.n_layers + 2

    @property
    def total_params(self) -> int:
        return sum(t.numel for t in self.tiles)

    @property
    def persistent_bytes(self) -> int:
        return sum(t.nbytes for t in self.tiles)

    def tile_for(self, unit: int) -> LayerTile:
        return self.tiles[self.alias_map[unit]]

    def region(self, unit: int) -> tuple[int, int, tuple[int, ...]]:
        """Physical (tile index, offset, shape) backing a logical unit."""
        tile = self.tile_for(unit)
        name, _ = unit_layout(self.config, unit)[0]
        key = name if name in tile.offset_table else next(iter(tile.offset_table))
        offset, shape = tile.offset_table[key]
        return self.alias_map[unit], offset, shape

    def consumers(self, tile_index: int) -> list[int]:
        return [u for u, t in self.alias_map.items() if t == tile_index]

    def params_dict(self) -> dict[str, np.ndarray]:
        """Float32 copies of every logical parameter, named as in :mod:`ramstream.oracle`."""
        out = {"embed": load_values(self.tiles[0].tensor("embed")).copy()}
        for i in range(1, self.config.n_layers + 1):
            tile = self.tiles[i]
            for name in tile.offset_table:
                out[f"block.{i}.{name}"] = load_values(tile.tensor(name)).copy()
        if not self.config.tie_embeddings:
            out["head"] = load_values(self.tiles[-1].tensor("head")).copy()
        return out

    def grads_dict(self) -> dict[str, np.ndarray]:
        out = {"embed": load_values(self.tiles[0].tensor("embed", "grads")).copy()}
        for i in range(1, self.config.n_layers + 1):
            tile = self.tiles[i]
            for name in tile.offset_table:
                out[f"block.{i}.{name}"] = load_values(tile.tensor(name, "grads")).copy()
        if not self.config.tie_embeddings:
            out["head"] = load_values(self.tiles[-1].tensor("head", "grads")).copy()
        return out

    def load_params(self, params: dict[str, np.ndarray]):
        """Overwrite weights from a name -> array mapping (rounded on store)."""
        for key, value in params.items():
            if key in ("embed", "head"):
                tile = self.tiles[0] if key == "embed" else self.tile_for(self.config.n_layers + 1)
                name = "embed" if tile.name == "embed" else "head"
            else:
                _, idx, name = key.split(".")
                tile = self.tiles[int(idx)]
            tile.tensor(name)[...] = store_values(np.asarray(value, np.float32), self.storage)


def _empty_store(config: ModelConfig, storage: str) -> MasterStore:
    if config.params is not None:
        raise StoreError("a planner-only config (explicit params) cannot be allocated")
    if storage not in STORAGE_BYTES:
        raise StoreError(f"unknown storage mode {storage!r}")
    L = config.n_layers
    units = list(range(L + 1)) if config.tie_embeddings else list(range(L + 2))
    tiles = []
    for unit in units:
        layout = unit_layout(config, unit)
        numel = sum(int(np.prod(s)) for _, s in layout)
        buf = aligned_empty(sum(STORAGE_BYTES[storage]) * numel)
        buf[...] = 0
        tiles.append(LayerTile(unit, unit_name(config, unit), numel, storage, buf, _offset_table(layout)))
    alias_map = {u: u for u in units}
    if config.tie_embeddings:
        alias_map[L + 1] = 0
    return MasterStore(config, storage, tiles, alias_map)


def build_store(config: ModelConfig, seed: int = 0, storage: str = BF16) -> MasterStore:
    """Allocate and initialise every tile (trunc-normal weights, unit norm scales, zero state)."""
    store = _empty_store(config, storage)
    rng = np.random.default_rng(seed)
    for tile in store.tiles:
        for name, (offset, shape) in tile.offset_table.items():
            if name.endswith("norm"):
                values = np.ones(shape, np.float32)
            else:
                values = _trunc_normal(rng, shape)
            tile.tensor(name)[...] = store_values(values, storage)
    return store


# ---------------------------------------------------------------------------
# Pinned staging buffers and the gradient slab pool
# ---------------------------------------------------------------------------

@dataclass
class StagingBuffer:
    capacity: int
    payload: np.ndarray
    occupant: int | None = None
    nbytes: int = 0
    pinned: bool = True

    @classmethod
    def allocate(cls, capacity: int) -> "StagingBuffer":
        return cls(capacity, aligned_empty(capacity))


def staging_capacity(store: MasterStore) -> int:
    return max(t.weight_nbytes for t in store.tiles)


def make_staging(store: MasterStore) -> tuple[StagingBuffer, StagingBuffer]:
    cap = staging_capacity(store)
    return StagingBuffer.allocate(cap), StagingBuffer.allocate(cap)


def pack_layer(store: MasterStore, unit: int, buf: StagingBuffer):
    """Copy one layer's weight region into a staging buffer with a single contiguous copy."""
    tile = store.tile_for(unit)
    n = tile.weight_nbytes
    if n > buf.capacity:
        raise StoreError(f"{tile.name} needs {n} staging bytes, buffer holds {buf.capacity}")
    np.copyto(buf.payload[:n], tile.weight_bytes())
    store.copies["pack"] += 1
    buf.occupant = unit
    buf.nbytes = n


class SlabState(enum.Enum):
    FREE = "FREE"
    IN_FLIGHT = "IN_FLIGHT"
    READY = "READY"
    ACCUMULATING = "ACCUMULATING"


_NEXT_STATE = {
    SlabState.FREE: SlabState.IN_FLIGHT,
    SlabState.IN_FLIGHT: SlabState.READY,
    SlabState.READY: SlabState.ACCUMULATING,
    SlabState.ACCUMULATING: SlabState.FREE,
}


@dataclass
class GradSlab:
    index: int
    capacity: int
    payload: np.ndarray
    state: SlabState = SlabState.FREE
    unit: int | None = None
    nbytes: int = 0

    def advance(self, new: SlabState):
        if _NEXT_STATE[self.state] is not new:
            raise SlabProtocolError(f"slab {self.index}: illegal transition {self.state.value} -> {new.value}")
        self.state = new


class SlabPool:
    """Fixed set of equally sized gradient slabs, handed out round-robin."""

    def __init__(self, n_slabs: int, capacity: int):
        if n_slabs < 1:
            raise StoreError("slab pool needs at least one slab")
        self.capacity = capacity
        self.slabs = [GradSlab(i, capacity, aligned_empty(capacity)) for i in range(n_slabs)]
        self._cursor = 0
        self.stalls = 0
        self.peak_in_use = 0

    def __len__(self):
        return len(self.slabs)

    @property
    def nbytes(self) -> int:
        return self.capacity * len(self.slabs)

    def next_slab(self) -> GradSlab:
        """The slab the next request will receive (it may still be busy)."""
        return self.slabs[self._cursor]

    def claim(self, unit: int, nbytes: int) -> GradSlab:
        slab = self.slabs[self._cursor]
        if nbytes > slab.capacity:
            raise StoreError(f"gradient of {nbytes} bytes exceeds slab capacity {slab.capacity}")
        slab.advance(SlabState.IN_FLIGHT)
        slab.unit, slab.nbytes = unit, nbytes
        self._cursor = (self._cursor + 1) % len(self.slabs)
        in_use = sum(s.state is not SlabState.FREE for s in self.slabs)
        self.peak_in_use = max(self.peak_in_use, in_use)
        return slab

    def pending(self) -> list[GradSlab]:
        return [s for s in self.slabs if s.state is not SlabState.FREE]


def make_slab_pool(store: MasterStore, n_slabs: int = DEFAULT_SLABS) -> SlabPool:
    return SlabPool(n_slabs, max(t.grad_nbytes for t in store.tiles))


def accumulate_slab(store: MasterStore, slab: GradSlab):
    """Fold a READY slab into its tile's gradient region (FP32 add, re-round on store)."""
    if slab.state is not SlabState.READY:
        raise SlabProtocolError(f"slab {slab.index} accumulated in state {slab.state.value}")
    slab.advance(SlabState.ACCUMULATING)
    tile = store.tile_for(slab.unit)
    dtype = _weight_dtype(store.storage)
    incoming = load_values(slab.payload[:slab.nbytes].view(dtype))
    tile.grads[...] = store_values(load_values(tile.grads) + incoming, store.storage)
    store.copies["acc"] += 1
    slab.unit, slab.nbytes = None, 0
    slab.advance(SlabState.FREE)


def adam_step(store: MasterStore, hyper: AdamConfig, t: int, tiles: list[int] | None = None):
    """Decoupled-weight-decay Adam applied in place to the selected tiles (all by default).

    Every selected gradient is checked before anything is written, so a
    non-finite gradient leaves the store untouched.
    """
    if t < 1:
        raise ValueError("optimizer step index starts at 1")
    chosen = range(len(store.tiles)) if tiles is None else tiles
    for idx in chosen:
        if not np.all(np.isfinite(load_values(store.tiles[idx].grads))):
            raise NonFiniteGradientError(store.tiles[idx].name)
    b1, b2 = np.float32(hyper.beta1), np.float32(hyper.beta2)
    bc1 = np.float32(1.0 - hyper.beta1 ** t)
    bc2 = np.float32(1.0 - hyper.beta2 ** t)
    lr, eps, wd = np.float32(hyper.lr), np.float32(hyper.eps), np.float32(hyper.weight_decay)
    one = np.float32(1.0)
    for idx in chosen:
        tile = store.tiles[idx]
        g = load_values(tile.grads)
        m, v = tile.moment_m, tile.moment_v
        m[...] = b1 * m + (one - b1) * g
        v[...] = b2 * v + (one - b2) * g * g
        theta = load_values(tile.weights)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        tile.weights[...] = store_values(theta - lr * (update + wd * theta), store.storage)
        tile.grads[...] = 0


def host_bytes_report(store: MasterStore, pool: SlabPool, staging) -> dict[str, int]:
    persistent = store.persistent_bytes
    slabs = pool.nbytes
    staged = sum(b.capacity for b in staging)
    return {
        "persistent": persistent,
        "slabs": slabs,
        "staging": staged,
        "total": persistent + slabs + staged,
        "bytes_per_param": persistent // max(store.total_params, 1),
    }
