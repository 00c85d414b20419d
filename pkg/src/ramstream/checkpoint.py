"""HLM1 checkpoint files: a little-endian header followed by 4096-aligned tile payloads.

Layout::

    b"HLM1"  uint32 version
    uint32 n_layers, hidden, ffn, vocab, n_tiles
    uint8  storage code, tied flag      uint64 optimizer step
    n_tiles x (uint32 layer_id, uint64 numel, uint8 weight dtype code, uint8 grad dtype code)
    uint32 n_alias, n_alias x (uint32 unit, uint32 tile index)
    zero padding to 4096, then each tile's raw bytes padded to 4096
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

from .config import BF16, FP32, ModelConfig
from .host_store import ALIGN, MasterStore, StoreError, _empty_store

MAGIC = b"HLM1"
VERSION = 1
_STORAGE_CODES = {BF16: 0, FP32: 1}
_DTYPE_CODES = {BF16: (1, 1), FP32: (2, 2)}  # (weights, grads); moments are always float32

_HEAD = struct.Struct("<4sIIIIIIBBQ")
_TILE = struct.Struct("<IQBB")
_ALIAS = struct.Struct("<II")


class CheckpointError(StoreError):
    pass


def _pad(n: int) -> int:
    return (-n) % ALIGN


def save_checkpoint(store: MasterStore, path: str | os.PathLike):
    cfg = store.config
    parts = [_HEAD.pack(MAGIC, VERSION, cfg.n_layers, cfg.hidden, cfg.ffn, cfg.vocab,
                        len(store.tiles), _STORAGE_CODES[store.storage],
                        int(cfg.tie_embeddings), store.step)]
    w_code, g_code = _DTYPE_CODES[store.storage]
    for tile in store.tiles:
        parts.append(_TILE.pack(tile.layer_id, tile.numel, w_code, g_code))
    parts.append(struct.pack("<I", len(store.alias_map)))
    for unit, idx in sorted(store.alias_map.items()):
        parts.append(_ALIAS.pack(unit, idx))
    header = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\0" * _pad(len(header)))
        for tile in store.tiles:
            fh.write(tile.buffer.tobytes())
            fh.write(b"\0" * _pad(tile.nbytes))


def load_checkpoint(path: str | os.PathLike, config: ModelConfig | None = None) -> MasterStore:
    """Rebuild a store from an HLM1 file; ``config`` (if given) must match its dimensions."""
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an HLM1 checkpoint")
    magic, version, L, h, f, V, n_tiles, storage_code, tied, step = _HEAD.unpack_from(data, 0)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    storage = {v: k for k, v in _STORAGE_CODES.items()}.get(storage_code)
    if storage is None:
        raise CheckpointError(f"{path}: unknown storage code {storage_code}")
    if config is None:
        config = ModelConfig(L, h, f, V, tie_embeddings=bool(tied))
    elif (config.n_layers, config.hidden, config.ffn, config.vocab, config.tie_embeddings) != (L, h, f, V, bool(tied)):
        raise CheckpointError(f"{path}: checkpoint dims (L={L}, h={h}, f={f}, V={V}, tied={bool(tied)}) "
                              "do not match the configured model")
    store = _empty_store(config, storage)
    if n_tiles != len(store.tiles):
        raise CheckpointError(f"{path}: {n_tiles} tiles, model expects {len(store.tiles)}")
    pos = _HEAD.size
    for tile in store.tiles:
        layer_id, numel, w_code, g_code = _TILE.unpack_from(data, pos)
        pos += _TILE.size
        if (layer_id, numel) != (tile.layer_id, tile.numel) or (w_code, g_code) != _DTYPE_CODES[storage]:
            raise CheckpointError(f"{path}: tile table mismatch at {tile.name}")
    (n_alias,) = struct.unpack_from("<I", data, pos)
    pos += 4
    alias = {}
    for _ in range(n_alias):
        unit, idx = _ALIAS.unpack_from(data, pos)
        pos += _ALIAS.size
        alias[unit] = idx
    if alias != store.alias_map:
        raise CheckpointError(f"{path}: alias table does not match the model's tie structure")
    pos += _pad(pos)
    for tile in store.tiles:
        end = pos + tile.nbytes
        if end > len(data):
            raise CheckpointError(f"{path}: truncated payload for {tile.name}")
        tile.buffer[...] = memoryview(data)[pos:end]
        pos = end + _pad(tile.nbytes)
    store.step = step
    return store
