import numpy as np
import pytest

from ramstream.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ramstream.config import AdamConfig
from ramstream.engine import StreamingEngine
from ramstream.host_store import build_store

from conftest import batch_for, tiny


def _same_store(a, b):
    assert a.step == b.step and a.storage == b.storage and a.alias_map == b.alias_map
    for ta, tb in zip(a.tiles, b.tiles):
        assert ta.buffer.tobytes() == tb.buffer.tobytes()


@pytest.mark.parametrize("storage", ["bf16", "fp32"])
@pytest.mark.parametrize("tied", [False, True])
def test_round_trip_is_bit_identical(tmp_path, storage, tied):
    cfg = tiny(tie_embeddings=tied)
    store = build_store(cfg, 2, storage)
    eng = StreamingEngine(store, cfg)
    eng.train_step(*batch_for(cfg))
    path = tmp_path / "s.hlm"
    save_checkpoint(store, path)
    loaded = load_checkpoint(path, cfg)
    _same_store(store, loaded)
    assert path.read_bytes()[:4] == b"HLM1"
    assert path.stat().st_size % 4096 == 0


def test_train_save_load_train_matches_uninterrupted(tmp_path):
    cfg = tiny(ckpt_interval=2)
    hyper = AdamConfig(lr=5e-3)
    batches = [batch_for(cfg, s) for s in range(4)]

    straight = build_store(cfg, 1, "fp32")
    eng = StreamingEngine(straight, cfg, hyper)
    for b in batches:
        eng.train_step(*b)

    first = build_store(cfg, 1, "fp32")
    eng = StreamingEngine(first, cfg, hyper)
    for b in batches[:2]:
        eng.train_step(*b)
    save_checkpoint(first, tmp_path / "mid.hlm")
    resumed = load_checkpoint(tmp_path / "mid.hlm", cfg)
    eng = StreamingEngine(resumed, cfg, hyper)
    for b in batches[2:]:
        eng.train_step(*b)
    _same_store(straight, resumed)


def test_rejects_foreign_and_mismatched_files(tmp_path):
    cfg = tiny()
    path = tmp_path / "s.hlm"
    save_checkpoint(build_store(cfg), path)
    with pytest.raises(CheckpointError, match="do not match"):
        load_checkpoint(path, cfg.replace(hidden=16))
    with pytest.raises(CheckpointError, match="do not match"):
        load_checkpoint(path, cfg.replace(tie_embeddings=True))
    bad = tmp_path / "bad.hlm"
    bad.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="not an HLM1"):
        load_checkpoint(bad)
    cut = tmp_path / "cut.hlm"
    cut.write_bytes(path.read_bytes()[:-5000])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(cut, cfg)


def test_header_carries_dims_without_config(tmp_path):
    cfg = tiny(tie_embeddings=True)
    store = build_store(cfg, storage="fp32")
    store.step = 7
    save_checkpoint(store, tmp_path / "s.hlm")
    loaded = load_checkpoint(tmp_path / "s.hlm")
    assert (loaded.config.n_layers, loaded.config.hidden, loaded.config.tie_embeddings) == (3, 8, True)
    assert loaded.step == 7 and loaded.storage == "fp32"
    assert np.array_equal(loaded.tiles[0].buffer, store.tiles[0].buffer)
