"""Block-wise streaming training step.

One call to :meth:`StreamingEngine.train_step` runs the whole iteration:

1. streaming forward: every block's weights are staged, streamed into one of
   two device buffers, bound to a template, applied and released; only the
   anchor hidden states survive;
2. loss anchoring: logits, loss and the head gradient, which is evacuated at
   once;
3. block-wise backward: for each block from the top, recompute its activations
   from the anchor below it, then run local backward layer by layer, streaming
   the weights in again and evacuating each flattened gradient to a host slab;
4. drain the slabs into the master store and apply Adam on the host.

Numerical work happens eagerly, in issue order. Alongside it the engine
records the logical stream/event trace that the scheduler validates and
times.
"""

from __future__ import annotations

import enum
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .arena import EDGE, ArenaProtocolError, BoundBuffer, DeviceArena
from .config import STORAGE_BYTES, AdamConfig, ModelConfig
from .host_store import (MasterStore, SlabState, StoreError, accumulate_slab, adam_step,
                         host_bytes_report, make_slab_pool, make_staging,
                         pack_layer, store_values)
from .numerics import (block_forward, block_local_backward, embed_backward, embed_forward,
                       head_backward, head_forward, loss_and_grad)
from .trace import (ACC, EMBED, EMBED_BACKWARD, FORWARD, GRAD_XFER, HEAD, LOCAL_BACKWARD,
                    OPT_STEP, RECOMPUTE, WEIGHT_XFER, EventTrace, ev_backward_done,
                    ev_buffer_free, ev_opt_done, ev_slab_free, ev_slab_ready, ev_weights_ready)

ACCUMULATION_MODES = ("inline", "lazy", "thread")


class Phase(enum.Enum):
    FORWARD = "FORWARD"
    ANCHOR = "ANCHOR"
    BACKWARD = "BACKWARD"
    OPTIMIZE = "OPTIMIZE"


_PHASE_ORDER = [Phase.FORWARD, Phase.ANCHOR, Phase.BACKWARD, Phase.OPTIMIZE]


@dataclass
class TrainStep:
    tokens: np.ndarray
    targets: np.ndarray
    t: int
    phase: Phase | None = None
    cursor: int | None = None
    g_carry: np.ndarray | None = None
    history: list[tuple[str, int | None]] = field(default_factory=list)

    def advance(self, phase: Phase, cursor: int | None = None):
        if self.phase is None and phase is not Phase.FORWARD:
            raise RuntimeError(f"a step starts with FORWARD, not {phase.value}")
        if self.phase is not None:
            now, new = _PHASE_ORDER.index(self.phase), _PHASE_ORDER.index(phase)
            ok = new == now + 1 or (phase is Phase.BACKWARD and self.phase is Phase.BACKWARD
                                    and cursor is not None and cursor < self.cursor)
            if not ok:
                raise RuntimeError(f"phase {phase.value}({cursor}) may not follow {self.phase.value}({self.cursor})")
        self.phase, self.cursor = phase, cursor
        self.history.append((phase.value, cursor))

    def set_carry(self, g: np.ndarray):
        if g.shape != self.tokens.shape + (g.shape[-1],):
            raise RuntimeError(f"activation gradient shape {g.shape} does not match the batch")
        self.g_carry = g


@dataclass
class StepResult:
    loss: float
    ledger: dict
    trace: EventTrace
    h2d_bytes: int
    d2h_bytes: int
    host: dict
    stalls: int
    recompute_forwards: int
    phases: list[tuple[str, int | None]]

    @property
    def arena_peak(self) -> int:
        return self.ledger["peak_sum"]


def block_flops(n_params: int, tokens: int) -> float:
    """Matmul-dominated forward cost of one block."""
    return 2.0 * n_params * tokens


class _AccWorker:
    """Single FIFO worker thread that runs host-side accumulation jobs in order."""

    def __init__(self):
        self._q: queue.Queue = queue.Queue()
        self._error: BaseException | None = None
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        while True:
            job = self._q.get()
            try:
                if job is None:
                    return
                if self._error is None:
                    job()
            except BaseException as exc:  # surfaced on join
                self._error = exc
            finally:
                self._q.task_done()

    def submit(self, job):
        self._q.put(job)

    def join(self):
        self._q.join()
        if self._error is not None:
            err, self._error = self._error, None
            raise err

    def close(self):
        self._q.put(None)
        self._thread.join()


class StreamingEngine:
    """Runs training steps against a host :class:`MasterStore` through a bounded :class:`DeviceArena`."""

    def __init__(self, store: MasterStore, config: ModelConfig, hyper: AdamConfig | None = None, *,
                 n_slabs: int = 12, accumulation: str = "inline", eager_optim: bool = False,
                 device_bytes: float | None = None):
        dims = lambda c: (c.n_layers, c.hidden, c.ffn, c.vocab, c.tie_embeddings)  # noqa: E731
        if dims(store.config) != dims(config):
            raise ValueError("engine config does not match the store's model dimensions")
        if accumulation not in ACCUMULATION_MODES:
            raise ValueError(f"accumulation must be one of {ACCUMULATION_MODES}")
        self.store = store
        self.config = config
        self.hyper = hyper or AdamConfig()
        self.accumulation = accumulation
        self.eager_optim = eager_optim
        self.arena = DeviceArena(config, store.storage, device_bytes)
        self.staging = make_staging(store)
        self.pool = make_slab_pool(store, n_slabs)
        self._worker = _AccWorker() if accumulation == "thread" else None
        self._slab_freed = [threading.Event() for _ in self.pool.slabs]
        for e in self._slab_freed:
            e.set()
        self.g_item = STORAGE_BYTES[store.storage][1]

    def close(self):
        if self._worker is not None:
            self._worker.close()
            self._worker = None

    # -- step-local bookkeeping -------------------------------------------------

    def _begin(self, tokens, targets):
        cfg = self.config
        t = self.store.step + 1
        self.arena.ledger.events.clear()
        self.arena.ledger.reset_peaks()
        self._st = TrainStep(tokens, targets, t)
        self._tr = EventTrace(n_layers=cfg.n_layers, meta={"tied": cfg.tie_embeddings,
                                                           "storage": self.store.storage})
        self._gen = [0, 0, 0]
        self._slab_use = [0] * len(self.pool)
        self._pending: list[tuple] = []
        self._acc_events: dict[int, list[str]] = {}
        self._acc_units: dict[int, set[int]] = {}
        self._h2d = self._d2h = 0
        self._stalls = 0
        self._recomputes = 0
        demands = [(FORWARD, i) for i in range(1, cfg.n_layers + 1)]
        for lo, hi in cfg.blocks():
            demands += [(RECOMPUTE, j) for j in range(lo, hi + 1)]
            demands += [(LOCAL_BACKWARD, i) for i in range(hi, lo - 1, -1)]
        self._demands = demands
        self._handles: dict[int, BoundBuffer] = {}
        self._next_demand = 0

    def _tile(self, unit: int) -> int:
        return self.store.alias_map[unit]

    # -- weight streaming -------------------------------------------------------

    def _prefetch(self, upto: int):
        """Issue weight transfers for block demands with index < ``upto``."""
        while self._next_demand < min(upto, len(self._demands)):
            k = self._next_demand
            unit = self._demands[k][1]
            buf, gen = k % 2, k // 2
            staged = self.staging[buf]
            pack_layer(self.store, unit, staged)
            handle = self.arena.stream_in(buf, staged, gen)
            self._handles[k] = handle
            self._h2d += handle.nbytes
            step = self._st.t
            self._tr.add(WEIGHT_XFER, layer=unit, tile=self._tile(unit), buf=buf, gen=gen, step=step,
                         bytes=handle.nbytes, waits=[ev_buffer_free(step, buf, gen - 1)] if gen else [],
                         records=[ev_weights_ready(step, buf, gen)])
            self._next_demand += 1

    def _edge_in(self, unit: int) -> int:
        """Stream embedding or head weights into the edge slot; returns the slot generation."""
        gen = self._gen[EDGE]
        self._gen[EDGE] += 1
        staged = self.staging[gen % 2]
        pack_layer(self.store, unit, staged)
        n = staged.nbytes
        self.arena.claim("workspace.edge", n, f"edge weights unit {unit}")
        np.copyto(self.arena.edge_buf[:n], staged.payload[:n])
        self.arena.device_copies += 1
        self._h2d += n
        step = self._st.t
        self._tr.add(WEIGHT_XFER, layer=unit, tile=self._tile(unit), buf=EDGE, gen=gen, step=step, bytes=n,
                     waits=[ev_buffer_free(step, EDGE, gen - 1)] if gen else [],
                     records=[ev_weights_ready(step, EDGE, gen)])
        self._edge_n = n
        return gen

    def _edge_weights(self) -> np.ndarray:
        cfg = self.config
        dtype = np.uint16 if self.store.storage == "bf16" else np.float32
        return self.arena.edge_buf[:self._edge_n].view(dtype).reshape(cfg.vocab, cfg.hidden)

    def _run_block(self, k: int, kind: str, x: np.ndarray, g: np.ndarray | None = None):
        """Bind demand ``k``'s buffer to its template and run forward, recompute or local backward."""
        self._prefetch(k + 1)
        handle = self._handles.pop(k)
        unit = handle.unit
        template = self.arena.templates[k % 2]
        self.arena.bind(template, handle)
        step = self._st.t
        n_block = self.config.block_params
        flops = block_flops(n_block, self.config.tokens)
        wait = [ev_weights_ready(step, handle.buf, handle.gen)]
        if kind == LOCAL_BACKWARD:
            acts = self.arena.pop_activation(unit)
            g_in, grads = block_local_backward(acts.x, acts, g, template.bound_views)
            self.arena.unbind(template)
            # weights are dead after local backward: the flattened gradient reuses the buffer
            self.arena.buffer_view(handle)[...] = store_values(grads.flatten(), self.store.storage)
            self._tr.add(LOCAL_BACKWARD, layer=unit, tile=self._tile(unit), buf=handle.buf, gen=handle.gen,
                         step=step, flops=2 * flops, waits=wait, records=[ev_backward_done(step, unit)])
            self._evacuate(unit, self.arena.stream_buf[handle.buf][:handle.nbytes], handle.buf, handle.gen,
                           lambda: self.arena.free_buffer(handle))
            self._prefetch(k + 3)
            return g_in
        out, acts = block_forward(x, template.bound_views)
        self.arena.push_activation(unit, acts)
        if kind == FORWARD:
            self.arena.pop_activation(unit)
        else:
            self._recomputes += 1
        self.arena.unbind(template)
        self.arena.free_buffer(handle)
        self._tr.add(kind, layer=unit, tile=self._tile(unit), buf=handle.buf, gen=handle.gen, step=step,
                     flops=flops, waits=wait, records=[ev_buffer_free(step, handle.buf, handle.gen)])
        self._prefetch(k + 3)
        return out

    # -- gradient evacuation and host accumulation --------------------------------

    def _claim_slab(self, unit: int, nbytes: int):
        slab = self.pool.next_slab()
        if slab.state is not SlabState.FREE:
            self._stalls += 1
            self.pool.stalls += 1
            if self.accumulation == "thread":
                self._slab_freed[slab.index].wait()
            else:
                while slab.state is not SlabState.FREE:
                    self._accumulate_next()
        self._slab_freed[slab.index].clear()
        return self.pool.claim(unit, nbytes)

    def _evacuate(self, unit: int, src: np.ndarray, buf: int, gen: int, release):
        n = src.nbytes
        slab = self._claim_slab(unit, n)
        use = self._slab_use[slab.index]
        self._slab_use[slab.index] += 1
        np.copyto(slab.payload[:n], src)
        slab.advance(SlabState.READY)
        step = self._st.t
        waits = [ev_backward_done(step, unit)]
        if use:
            waits.append(ev_slab_free(step, slab.index, use - 1))
        self._tr.add(GRAD_XFER, layer=unit, tile=self._tile(unit), buf=buf, gen=gen, slab=slab.index,
                     slab_use=use, step=step, bytes=n, waits=waits,
                     records=[ev_buffer_free(step, buf, gen), ev_slab_ready(step, slab.index, use)])
        self._d2h += n
        release()
        self._pending.append((slab, use, unit))
        if self.accumulation == "lazy":
            return
        self._accumulate_next()

    def _accumulate_next(self):
        """Fold the oldest pending slab into the store (inline, or handed to the worker)."""
        slab, use, unit = self._pending.pop(0)
        tile = self._tile(unit)
        step = self._st.t
        done = ev_slab_free(step, slab.index, use)
        self._tr.add(ACC, layer=unit, tile=tile, slab=slab.index, slab_use=use, step=step,
                     numel=self.store.tiles[tile].numel, waits=[ev_slab_ready(step, slab.index, use)],
                     records=[done])
        self._acc_events.setdefault(tile, []).append(done)
        self._acc_units.setdefault(tile, set()).add(unit)
        optimize = self._update and self.eager_optim and self._acc_units[tile] == set(self.store.consumers(tile))
        if optimize:
            self._opt_op(tile)

        def job(slab=slab, tile=tile, optimize=optimize):
            accumulate_slab(self.store, slab)
            self._slab_freed[slab.index].set()
            if optimize:
                adam_step(self.store, self.hyper, self._st.t, [tile])

        if self._worker is not None:
            self._worker.submit(job)
        else:
            job()

    def _opt_op(self, tile: int):
        step = self._st.t
        self._tr.add(OPT_STEP, tile=tile, step=step, numel=self.store.tiles[tile].numel,
                     waits=list(self._acc_events[tile]), records=[ev_opt_done(step, tile)])

    def _drain(self):
        while self._pending:
            self._accumulate_next()
        if self._worker is not None:
            self._worker.join()

    # -- the step ------------------------------------------------------------------

    def train_step(self, tokens, targets, cotangent_scale: float = 1.0, update: bool = True) -> StepResult:
        """One full step. With ``update=False`` the optimizer is skipped and the
        accumulated gradients are left in the store's tiles."""
        cfg = self.config
        self._update = update
        tokens = np.asarray(tokens)
        targets = np.asarray(targets)
        if tokens.shape != (cfg.batch, cfg.seq) or targets.shape != tokens.shape:
            raise ValueError(f"batch must have shape {(cfg.batch, cfg.seq)}, got {tokens.shape} / {targets.shape}")
        if not self.arena.is_idle():
            raise ArenaProtocolError("device arena holds state from a previous step")
        self._begin(tokens, targets)
        st, arena, L, K = self._st, self.arena, cfg.n_layers, cfg.ckpt_interval
        step, a_ckpt = st.t, arena.a_ckpt
        anchor_set = set(cfg.anchor_layers())

        # streaming forward
        st.advance(Phase.FORWARD, 0)
        edge_gen = self._edge_in(0)
        x = embed_forward(tokens, self._edge_weights())
        arena.claim("workspace.carry", a_ckpt, "h_0")
        embed_records = [] if cfg.tie_embeddings else [ev_buffer_free(step, EDGE, edge_gen)]
        self._tr.add(EMBED, layer=0, tile=0, buf=EDGE, gen=edge_gen, step=step,
                     waits=[ev_weights_ready(step, EDGE, edge_gen)], records=embed_records)
        arena.anchor_checkpoint(0, x)
        if not cfg.tie_embeddings:
            arena.release("workspace.edge", self._edge_n, "embed weights done")
            edge_gen = self._edge_in(L + 1)
        self._prefetch(2)
        for i in range(1, L + 1):
            st.cursor = i
            out = self._run_block(i - 1, FORWARD, x)
            arena.claim("workspace.carry", a_ckpt, f"h_{i}")
            arena.release("workspace.carry", a_ckpt, f"h_{i - 1}")
            if i in anchor_set:
                arena.anchor_checkpoint(i, out)
            x = out
        arena.release("workspace.carry", a_ckpt, f"h_{L}")

        # loss anchoring
        st.advance(Phase.ANCHOR, L + 1)
        h_L = arena.load_checkpoint(L)
        w_head = self._edge_weights()
        arena.claim("workspace.logits", 2 * 4 * cfg.tokens * cfg.vocab, "logits")
        logits = head_forward(h_L, w_head)
        loss, g_logits = loss_and_grad(logits, targets)
        if cotangent_scale != 1.0:
            g_logits = g_logits * np.float32(cotangent_scale)
        g, d_head = head_backward(h_L, w_head, g_logits)
        arena.release("workspace.logits", 2 * 4 * cfg.tokens * cfg.vocab, "logits")
        arena.claim("workspace.carry", a_ckpt, "g_L")
        st.set_carry(g)
        grad_bytes = self.g_item * cfg.vocab * cfg.hidden
        edge_view = arena.edge_buf[:grad_bytes]
        edge_view.view(np.uint16 if self.g_item == 2 else np.float32)[...] = \
            store_values(d_head.ravel(), self.store.storage)
        self._tr.add(HEAD, layer=L + 1, tile=self._tile(L + 1), buf=EDGE, gen=edge_gen, step=step,
                     flops=6.0 * cfg.vocab * cfg.hidden * cfg.tokens,
                     waits=[ev_weights_ready(step, EDGE, edge_gen)], records=[ev_backward_done(step, L + 1)])
        arena.drop_anchor(L)
        self._evacuate(L + 1, edge_view, EDGE, edge_gen,
                       lambda: arena.release("workspace.edge", self._edge_n, "head grads evacuated"))

        # block-wise backward
        for lo, hi in cfg.blocks():
            st.advance(Phase.BACKWARD, (lo - 1) // K)
            x = arena.load_checkpoint(lo - 1)
            for j in range(lo, hi + 1):
                x = self._run_block(self._next_block_demand(RECOMPUTE, j), RECOMPUTE, x)
            for i in range(hi, lo - 1, -1):
                g_in = self._run_block(self._next_block_demand(LOCAL_BACKWARD, i), LOCAL_BACKWARD, None, g)
                arena.claim("workspace.carry", a_ckpt, f"g_{i - 1}")
                arena.release("workspace.carry", a_ckpt, f"g_{i}")
                g = g_in
                st.set_carry(g)
            arena.drop_anchor(lo - 1)

        # embedding backward, scattered on the device and evacuated like a layer
        d_embed = embed_backward(tokens, g, cfg.vocab)
        egen = self._gen[EDGE]
        self._gen[EDGE] += 1
        arena.claim("workspace.edge", grad_bytes, "embed grads")
        edge_view = arena.edge_buf[:grad_bytes]
        edge_view.view(np.uint16 if self.g_item == 2 else np.float32)[...] = \
            store_values(d_embed.ravel(), self.store.storage)
        arena.release("workspace.carry", a_ckpt, "g_0")
        self._tr.add(EMBED_BACKWARD, layer=0, tile=0, buf=EDGE, gen=egen, step=step,
                     waits=[ev_buffer_free(step, EDGE, egen - 1)], records=[ev_backward_done(step, 0)])
        self._evacuate(0, edge_view, EDGE, egen,
                       lambda: arena.release("workspace.edge", grad_bytes, "embed grads evacuated"))
        self._drain()

        # host optimizer
        st.advance(Phase.OPTIMIZE)
        if self._update and not self.eager_optim:
            adam_step(self.store, self.hyper, step)
            for tile in range(len(self.store.tiles)):
                self._opt_op(tile)
        if self._update:
            self.store.step = step
        if not arena.is_idle():
            raise ArenaProtocolError(f"arena not empty after step: {arena.ledger.current}")
        return StepResult(
            loss=loss,
            ledger=arena.ledger.snapshot(),
            trace=self._tr,
            h2d_bytes=self._h2d,
            d2h_bytes=self._d2h,
            host=host_bytes_report(self.store, self.pool, self.staging),
            stalls=self._stalls,
            recompute_forwards=self._recomputes,
            phases=list(st.history),
        )

    def gradients(self, tokens, targets, cotangent_scale: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
        """Loss and widened per-parameter gradients of one batch; the store is left unchanged."""
        res = self.train_step(tokens, targets, cotangent_scale, update=False)
        grads = self.store.grads_dict()
        for tile in self.store.tiles:
            tile.grads[...] = 0
        return res.loss, grads

    def _next_block_demand(self, kind: str, unit: int) -> int:
        k = self._demand_cursor()
        if self._demands[k] != (kind, unit):
            raise StoreError(f"demand order broken: expected {self._demands[k]}, got {(kind, unit)}")
        return k

    def _demand_cursor(self) -> int:
        # the oldest demand whose buffer handle is still outstanding
        return min(self._handles)

    @property
    def ledger_events(self):
        return self.arena.ledger.events
