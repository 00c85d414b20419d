import numpy as np
import pytest

from ramstream.config import AdamConfig
from ramstream.host_store import (ALIGN, NonFiniteGradientError, SlabPool, SlabProtocolError, SlabState,
                                  StagingBuffer, StoreError, accumulate_slab, adam_step, build_store,
                                  load_values, make_slab_pool, make_staging, pack_layer, store_values)
from ramstream.oracle import _adam

from conftest import tiny


@pytest.mark.parametrize("tied", [False, True])
@pytest.mark.parametrize("storage,per_param", [("bf16", 12), ("fp32", 16)])
def test_persistent_bytes_per_param(tied, storage, per_param):
    cfg = tiny(tie_embeddings=tied)
    store = build_store(cfg, storage=storage)
    assert store.total_params == cfg.total_params
    assert store.persistent_bytes == per_param * cfg.total_params


def test_tied_head_aliases_embedding_tile():
    cfg = tiny(tie_embeddings=True)
    store = build_store(cfg)
    L = cfg.n_layers
    assert len(store.tiles) == L + 1
    assert store.alias_map[L + 1] == 0
    assert store.tile_for(L + 1) is store.tile_for(0)
    assert sorted(store.consumers(0)) == [0, L + 1]
    assert "head" not in store.params_dict()


def test_tiles_are_aligned_and_layer_contiguous():
    store = build_store(tiny())
    for tile in store.tiles:
        assert tile.buffer.ctypes.data % ALIGN == 0
        # weights | grads | m | v back to back in one buffer
        assert np.shares_memory(tile.weights, tile.buffer)
        assert tile.weights.nbytes + tile.grads.nbytes + tile.moment_m.nbytes + tile.moment_v.nbytes == tile.nbytes


def test_init_is_seeded_and_bounded():
    a, b, c = build_store(tiny(), 3), build_store(tiny(), 3), build_store(tiny(), 4)
    pa, pb, pc = a.params_dict(), b.params_dict(), c.params_dict()
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert not np.array_equal(pa["embed"], pc["embed"])
    assert np.abs(pa["block.1.wq"]).max() <= 0.04 + 1e-3
    assert np.all(pa["block.2.attn_norm"] == 1.0)


def test_pack_layer_is_one_copy_and_exact():
    store = build_store(tiny())
    buf = make_staging(store)[0]
    before = store.copies["pack"]
    pack_layer(store, 2, buf)
    assert store.copies["pack"] == before + 1
    tile = store.tile_for(2)
    assert buf.nbytes == tile.weight_nbytes and buf.occupant == 2
    np.testing.assert_array_equal(buf.payload[:buf.nbytes], tile.weight_bytes())


def test_pack_layer_rejects_small_buffer():
    store = build_store(tiny())
    with pytest.raises(StoreError):
        pack_layer(store, 1, StagingBuffer.allocate(16))


def test_slab_state_machine_is_strict():
    pool = SlabPool(2, 64)
    slab = pool.claim(1, 32)
    assert slab.state is SlabState.IN_FLIGHT
    with pytest.raises(SlabProtocolError):
        slab.advance(SlabState.FREE)
    with pytest.raises(StoreError):
        pool.claim(2, 65)  # oversize claim fails before touching the slab
    second = pool.claim(2, 16)
    with pytest.raises(SlabProtocolError):
        pool.claim(3, 16)  # round-robin reached the busy first slab
    assert pool.peak_in_use == 2 and second.index == 1


def test_accumulate_requires_ready_and_adds():
    store = build_store(tiny(), storage="fp32")
    pool = make_slab_pool(store, 1)
    tile = store.tile_for(1)
    slab = pool.claim(1, tile.grad_nbytes)
    with pytest.raises(SlabProtocolError):
        accumulate_slab(store, slab)
    slab.payload[:slab.nbytes].view(np.float32)[...] = 1.5
    slab.advance(SlabState.READY)
    accumulate_slab(store, slab)
    again = pool.claim(1, tile.grad_nbytes)
    again.payload[:tile.grad_nbytes].view(np.float32)[...] = 0.25
    again.advance(SlabState.READY)
    accumulate_slab(store, again)
    assert np.all(load_values(tile.grads) == 1.75)
    assert slab.state is SlabState.FREE


def test_adam_matches_reference_formula():
    cfg = tiny()
    store = build_store(cfg, storage="fp32")
    hyper = AdamConfig(lr=3e-3, weight_decay=0.01)
    params = store.params_dict()
    rng = np.random.default_rng(0)
    state = {}
    for t in (1, 2, 3):
        grads = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in params.items()}
        for k, g in grads.items():
            _write_grad(store, k, g)
        adam_step(store, hyper, t)
        _adam(params, grads, state, hyper, t)
    got = store.params_dict()
    for k in params:
        np.testing.assert_allclose(got[k], params[k], rtol=1e-6, atol=1e-7)
    assert all(not load_values(t.grads).any() for t in store.tiles)


def _write_grad(store, key, g):
    if key in ("embed", "head"):
        unit = 0 if key == "embed" else store.config.n_layers + 1
        store.tile_for(unit).tensor(key, "grads")[...] = store_values(g, store.storage)
    else:
        _, i, name = key.split(".")
        store.tiles[int(i)].tensor(name, "grads")[...] = store_values(g, store.storage)


def test_non_finite_gradient_aborts_before_any_write():
    store = build_store(tiny())
    before = [t.buffer.copy() for t in store.tiles]
    store.tiles[-1].grads[0] = store_values(np.array([np.inf], np.float32), "bf16")[0]
    with pytest.raises(NonFiniteGradientError, match=store.tiles[-1].name):
        adam_step(store, AdamConfig(), 1)
    for tile, old in zip(store.tiles[:-1], before[:-1]):
        np.testing.assert_array_equal(tile.buffer, old)


def test_bf16_store_rounds_weights():
    store = build_store(tiny(), storage="bf16")
    w = store.tiles[1].weights
    assert w.dtype == np.uint16
    vals = load_values(w)
    np.testing.assert_array_equal(store_values(vals, "bf16"), w)


def test_planner_only_config_cannot_allocate():
    with pytest.raises(StoreError):
        build_store(tiny().replace(params=10**9))
