import numpy as np
import pytest

from ramstream.arena import (STREAM_BUFS, ArenaOOM, ArenaProtocolError, DeviceArena, region_capacities,
                             replay_peaks)
from ramstream.engine import StreamingEngine
from ramstream.host_store import build_store, make_staging, pack_layer
from ramstream.numerics import BlockActivations, activation_bytes
from ramstream.planner import device_bound_for

from conftest import batch_for, tiny


def _acts(cfg, fill=0.0):
    B, S, h, f = cfg.batch, cfg.seq, cfg.hidden, cfg.ffn
    z = lambda *s: np.full(s, fill, np.float32)  # noqa: E731
    return BlockActivations(z(B, S, h), z(B, S, 1), z(B, S, h), z(B, S, h), z(B, S, h), z(B, S, h),
                            z(B, S, S), z(B, S, h), z(B, S, h), z(B, S, 1), z(B, S, h), z(B, S, f), z(B, S, f))


def test_capacities_sum_to_planner_bound():
    for cfg in (tiny(), tiny(n_layers=7, ckpt_interval=3), tiny(tie_embeddings=True)):
        for storage in ("bf16", "fp32"):
            arena = DeviceArena(cfg, storage)
            assert arena.budget == device_bound_for(cfg, storage)["total"]


def test_activation_region_holds_k_blocks():
    cfg = tiny(n_layers=6, ckpt_interval=3)
    caps = region_capacities(cfg, "bf16")
    assert caps["activation_stack"] == 3 * activation_bytes(cfg.batch, cfg.seq, cfg.hidden, cfg.ffn)
    assert caps["ckpt_anchors"] == 3 * 4 * cfg.batch * cfg.seq * cfg.hidden


def test_construction_oom_names_region():
    cfg = tiny()
    caps = region_capacities(cfg, "bf16")
    with pytest.raises(ArenaOOM) as err:
        DeviceArena(cfg, "bf16", device_bytes=caps[STREAM_BUFS[0]] + caps[STREAM_BUFS[1]] + 10)
    assert err.value.region == "activation_stack"
    assert "activation_stack" in str(err.value)


def test_claim_beyond_region_is_oom():
    arena = DeviceArena(tiny(), "bf16")
    cap = arena.capacities["workspace.logits"]
    arena.claim("workspace.logits", cap)
    with pytest.raises(ArenaOOM):
        arena.claim("workspace.logits", 1)


def test_push_pop_restores_bytes_and_enforces_lifo():
    cfg = tiny(n_layers=3, ckpt_interval=3)
    arena = DeviceArena(cfg, "bf16")
    before = arena.ledger.current["activation_stack"]
    for layer in (1, 2, 3):
        arena.push_activation(layer, _acts(cfg))
    with pytest.raises(ArenaProtocolError, match="LIFO"):
        arena.pop_activation(2)
    for layer in (3, 2, 1):
        arena.pop_activation(layer)
    assert arena.ledger.current["activation_stack"] == before
    with pytest.raises(ArenaOOM):
        for layer in range(4):
            arena.push_activation(layer, _acts(cfg))


def test_anchor_layers():
    assert tiny(n_layers=8, ckpt_interval=4).anchor_layers() == [0, 4, 8]
    assert tiny(n_layers=7, ckpt_interval=3).anchor_layers() == [0, 3, 6, 7]
    assert tiny(n_layers=7, ckpt_interval=3).blocks() == [(7, 7), (4, 6), (1, 3)]


def test_engine_step_anchors_and_leaves_arena_empty():
    cfg = tiny(n_layers=8, ckpt_interval=4)
    eng = StreamingEngine(build_store(cfg), cfg)
    seen = []
    orig = eng.arena.anchor_checkpoint
    eng.arena.anchor_checkpoint = lambda i, h: (seen.append(i), orig(i, h))
    eng.train_step(*batch_for(cfg))
    assert seen == [0, 4, 8]
    assert all(v == 0 for v in eng.arena.ledger.current.values())


def test_stream_buffer_protocol():
    cfg = tiny()
    store = build_store(cfg)
    arena = DeviceArena(cfg, "bf16")
    stage = make_staging(store)[0]
    pack_layer(store, 1, stage)
    handle = arena.stream_in(0, stage)
    with pytest.raises(ArenaProtocolError, match="busy"):
        arena.stream_in(0, stage)
    tmpl = arena.templates[0]
    arena.bind(tmpl, handle)
    with pytest.raises(ArenaProtocolError):
        arena.bind(tmpl, handle)
    np.testing.assert_array_equal(tmpl.bound_views.wq, store.tiles[1].tensor("wq"))
    assert np.shares_memory(tmpl.bound_views.wq, arena.stream_buf[0])
    arena.unbind(tmpl)
    with pytest.raises(ArenaProtocolError):
        arena.unbind(tmpl)
    arena.free_buffer(handle)
    with pytest.raises(ArenaProtocolError):
        arena.free_buffer(handle)
    assert arena.is_idle()


def test_replayed_peaks_match_ledger():
    cfg = tiny(n_layers=5, ckpt_interval=2)
    eng = StreamingEngine(build_store(cfg), cfg)
    res = eng.train_step(*batch_for(cfg))
    peak, instant = replay_peaks(eng.ledger_events)
    assert peak == res.ledger["peak"]
    assert instant == res.ledger["peak_instant"]
    assert res.ledger["peak_instant"] <= res.ledger["peak_sum"] == eng.arena.budget


def test_depth_independence_excluding_anchors():
    peaks = {}
    for L in (8, 64):
        cfg = tiny(n_layers=L, ckpt_interval=4, hidden=8, ffn=16)
        eng = StreamingEngine(build_store(cfg), cfg)
        res = eng.train_step(*batch_for(cfg))
        peaks[L] = {k: v for k, v in res.ledger["peak"].items() if k != "ckpt_anchors"}
        assert res.arena_peak == device_bound_for(cfg)["total"]
    assert peaks[8] == peaks[64]
