"""Event-protocol validation and discrete-event timing of stream traces."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

from .config import BF16, STORAGE_BYTES, HardwareConfig, ModelConfig
from .trace import (ACC, COMPUTE, D2H, EMBED, EMBED_BACKWARD, FORWARD, GRAD_XFER, H2D, HEAD, HOST,
                    LOCAL_BACKWARD, OPT_STEP, PRODUCERS, RECOMPUTE, STREAMS, WEIGHT_READERS,
                    WEIGHT_XFER, EventTrace, StreamOp, concat_steps, ev_backward_done,
                    ev_buffer_free, ev_opt_done, ev_slab_free, ev_slab_ready, ev_weights_ready,
                    event_rule)

EDGE = 2


class TraceError(ValueError):
    """Malformed trace: unknown events or a dependency cycle."""


# ---------------------------------------------------------------------------
# Protocol validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    rule: str
    op_id: int
    message: str

    def __str__(self):
        return f"[{self.rule}] op {self.op_id}: {self.message}"


def _bkey(op: StreamOp):
    return (op.step, op.buf, op.gen)


def validate_trace(trace: EventTrace) -> list[Violation]:
    """Check the event protocol, buffer/slab discipline and activation-stack order.

    Violations are returned as data, in issue order; an empty list means the
    trace is safe.
    """
    ops = trace.ops
    out: list[Violation] = []
    recorded_at: dict[str, int] = {}
    for idx, op in enumerate(ops):
        for ev in op.records:
            if ev in recorded_at:
                out.append(Violation("duplicate_event", op.id, f"{ev} already recorded by op {ops[recorded_at[ev]].id}"))
            else:
                recorded_at[ev] = idx

    producer: dict[tuple, tuple[int, StreamOp]] = {}
    users: dict[tuple, list[int]] = defaultdict(list)
    keys_by_buf: dict[int, list[tuple]] = defaultdict(list)
    for idx, op in enumerate(ops):
        if op.kind in PRODUCERS:
            producer.setdefault(_bkey(op), (idx, op))
            keys_by_buf[op.buf].append(_bkey(op))
        elif op.kind in WEIGHT_READERS or op.kind == GRAD_XFER:
            users[_bkey(op)].append(idx)
    prev_key: dict[tuple, tuple] = {}
    for buf, keys in keys_by_buf.items():
        ordered = sorted(set(keys), key=lambda k: (k[0], k[2]))
        prev_key.update({b: a for a, b in zip(ordered, ordered[1:])})

    def wait_ok(idx, op, ev, rule):
        if ev not in op.waits:
            out.append(Violation(rule, op.id, f"{op.label} does not wait on {ev}"))
            return False
        return True

    checked: set[tuple[int, str]] = set()
    for idx, op in enumerate(ops):
        if op.kind in WEIGHT_READERS:
            ev = ev_weights_ready(op.step, op.buf, op.gen)
            if wait_ok(idx, op, ev, "weights_ready"):
                prod = producer.get(_bkey(op))
                if prod is None or prod[1].kind != WEIGHT_XFER:
                    out.append(Violation("weights_ready", op.id, f"{op.label} reads buf{op.buf}#{op.gen}, "
                                         "which no weight transfer fills"))
                elif prod[1].tile != op.tile:
                    out.append(Violation("weights_ready", op.id, f"{op.label} reads buf{op.buf}#{op.gen}, "
                                         f"which holds tile {prod[1].tile}, not {op.tile}"))
        if op.kind == GRAD_XFER:
            wait_ok(idx, op, ev_backward_done(op.step, op.layer), "backward_done")
            if op.slab_use:
                wait_ok(idx, op, ev_slab_free(op.step, op.slab, op.slab_use - 1), "slab_state")
        if op.kind == ACC:
            wait_ok(idx, op, ev_slab_ready(op.step, op.slab, op.slab_use), "slab_state")
        if op.kind in PRODUCERS:
            before = prev_key.get(_bkey(op))
            if before is not None:
                late = [ops[j].id for j in users.get(before, []) + [producer[before][0]] if j > idx]
                if late:
                    out.append(Violation("buffer_overwrite", op.id,
                                         f"{op.label} refills buf{op.buf} before ops {late} finished with it"))
                    checked.update((idx, ev) for ev in op.waits if event_rule(ev) == "buffer_free")
                else:
                    want = ev_buffer_free(before[0], op.buf, before[2])
                    wait_ok(idx, op, want, "buffer_free")
        # every wait must name an event recorded earlier in issue order
        for ev in op.waits:
            if (idx, ev) in checked:
                continue
            at = recorded_at.get(ev)
            if at is None:
                out.append(Violation(event_rule(ev), op.id, f"{op.label} waits on {ev}, which is never recorded"))
            elif at >= idx:
                out.append(Violation(event_rule(ev), op.id,
                                     f"{op.label} waits on {ev}, recorded later by op {ops[at].id}"))

    # slab state machine, replayed in issue order
    state: dict[int, str] = defaultdict(lambda: "FREE")
    filled_by: dict[int, int] = {}
    for op in ops:
        if op.kind == GRAD_XFER:
            if state[op.slab] != "FREE":
                out.append(Violation("slab_state", op.id,
                                     f"{op.label} fills slab {op.slab} while it is {state[op.slab]}"))
            state[op.slab] = "READY"
            filled_by[op.slab] = op.id
        elif op.kind == ACC:
            if state[op.slab] != "READY":
                out.append(Violation("slab_state", op.id,
                                     f"{op.label} accumulates slab {op.slab} while it is {state[op.slab]}"))
            state[op.slab] = "FREE"
    for slab, st in sorted(state.items()):
        if st != "FREE":
            out.append(Violation("slab_state", filled_by[slab], f"slab {slab} is never accumulated"))

    # activation stack: recompute pushes, local backward pops
    stack: list[tuple[int, int]] = []
    for op in ops:
        if op.kind == RECOMPUTE:
            stack.append((op.step, op.layer))
        elif op.kind == LOCAL_BACKWARD:
            if not stack:
                out.append(Violation("lifo", op.id, f"{op.label} pops an empty activation stack"))
            elif stack[-1] != (op.step, op.layer):
                out.append(Violation("lifo", op.id, f"{op.label} pops layer {stack[-1][1]} (top of stack)"))
                if (op.step, op.layer) in stack:
                    stack.remove((op.step, op.layer))
            else:
                stack.pop()
    return out


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimingModel:
    pcie_bandwidth: float = 26e9
    device_flops: float = 300e12
    cpu_optim_rate: float = 2e9
    pageable_penalty: float = 2.0

    def __post_init__(self):
        for name in ("pcie_bandwidth", "device_flops", "cpu_optim_rate", "pageable_penalty"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @classmethod
    def from_hardware(cls, hw: HardwareConfig) -> "TimingModel":
        return cls(hw.pcie_bandwidth, hw.device_flops, hw.cpu_optim_rate, hw.pageable_penalty)

    def duration(self, op: StreamOp) -> float:
        if op.duration is not None:
            return float(op.duration)
        if op.stream in (H2D, D2H):
            penalty = 1.0 if op.pinned else self.pageable_penalty
            return op.bytes / self.pcie_bandwidth * penalty
        if op.stream == COMPUTE:
            return op.flops / self.device_flops
        return op.numel / self.cpu_optim_rate


_PRIORITY = {H2D: 0, COMPUTE: 1, D2H: 2, HOST: 3}


@dataclass
class TimedOp:
    op: StreamOp
    start: float
    end: float
    deps: list[int]


@dataclass
class Timeline:
    entries: list[TimedOp]
    makespan: float
    busy: dict[str, float] = field(default_factory=dict)

    @property
    def utilization(self) -> dict[str, float]:
        if self.makespan <= 0:
            return {s: 0.0 for s in self.busy}
        return {s: b / self.makespan for s, b in self.busy.items()}

    def stream(self, name: str) -> list[TimedOp]:
        return [e for e in self.entries if e.op.stream == name]

    @property
    def total_flops(self) -> float:
        return sum(e.op.flops for e in self.entries)


def simulate(trace: EventTrace, timing: TimingModel) -> Timeline:
    """Per-stream FIFO discrete-event simulation of a trace.

    An op starts at the later of its stream becoming free and every event it
    waits on being recorded; events are recorded when their op ends. Stream
    priority H2D > COMPUTE > D2H > HOST, then op id, breaks ties in the order
    ops are committed (the resulting times do not depend on it).
    """
    recorder: dict[str, StreamOp] = {}
    for op in trace.ops:
        for ev in op.records:
            recorder[ev] = op
    for op in trace.ops:
        missing = [ev for ev in op.waits if ev not in recorder]
        if missing:
            raise TraceError(f"op {op.id} ({op.label}) waits on unrecorded event(s): {', '.join(missing)}")
    queues = {s: [op for op in trace.ops if op.stream == s] for s in STREAMS}
    head = {s: 0 for s in STREAMS}
    free = {s: 0.0 for s in STREAMS}
    busy = {s: 0.0 for s in STREAMS}
    ev_time: dict[str, float] = {}
    entries: list[TimedOp] = []
    remaining = len(trace.ops)
    while remaining:
        best = None
        for s in STREAMS:
            if head[s] >= len(queues[s]):
                continue
            op = queues[s][head[s]]
            if all(ev in ev_time for ev in op.waits):
                start = max([free[s]] + [ev_time[ev] for ev in op.waits])
                key = (start, _PRIORITY[s], op.id)
                if best is None or key < best[0]:
                    best = (key, s, op)
        if best is None:
            stuck = [queues[s][head[s]].id for s in STREAMS if head[s] < len(queues[s])]
            raise TraceError(f"dependency cycle: stream heads {stuck} can never start")
        (start, _, _), s, op = best
        dur = timing.duration(op)
        end = start + dur
        for ev in op.records:
            ev_time[ev] = end
        free[s] = end
        busy[s] += dur
        head[s] += 1
        remaining -= 1
        deps = sorted({recorder[ev].id for ev in op.waits})
        entries.append(TimedOp(op, start, end, deps))
    entries.sort(key=lambda e: e.op.id)
    makespan = max((e.end for e in entries), default=0.0)
    return Timeline(entries, makespan, {s: busy[s] for s in STREAMS if queues[s]})


def throughput_report(timeline: Timeline, total_flops: float | None = None) -> dict:
    """Simulated TFLOP/s, the busiest device stream and the compute bubble fraction."""
    flops = timeline.total_flops if total_flops is None else total_flops
    span = timeline.makespan
    util = timeline.utilization
    device = {s: util.get(s, 0.0) for s in (COMPUTE, H2D, D2H)}
    bound = max(device, key=lambda s: (device[s], -_PRIORITY[s]))
    comp = timeline.stream(COMPUTE)
    bubble = 0.0
    if comp:
        window = max(e.end for e in comp) - min(e.start for e in comp)
        work = sum(e.end - e.start for e in comp)
        bubble = 1.0 - work / window if window > 0 else 0.0
    return {
        "makespan": span,
        "sim_tflops": flops / span / 1e12 if span > 0 else 0.0,
        "bound": bound,
        "bubble": bubble,
        "utilization": util,
    }


def timeline_rows(timeline: Timeline, report: dict | None = None) -> list[dict]:
    rows = [{"stream": e.op.stream, "kind": e.op.kind, "layer": e.op.layer,
             "t_start_us": round(e.start * 1e6, 6), "t_end_us": round(e.end * 1e6, 6), "deps": e.deps}
            for e in timeline.entries]
    report = report or throughput_report(timeline)
    rows.append({"summary": {"makespan_us": round(report["makespan"] * 1e6, 6),
                             "sim_tflops": report["sim_tflops"], "bound": report["bound"],
                             "bubble": report["bubble"]}})
    return rows


def timeline_jsonl(timeline: Timeline, report: dict | None = None) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in timeline_rows(timeline, report))


# ---------------------------------------------------------------------------
# Trace generators that need no numerics
# ---------------------------------------------------------------------------

def forward_pipeline_trace(n_layers: int, t_xfer: float, t_comp: float, buffers: int = 2) -> EventTrace:
    """Synthetic forward pass: one weight transfer and one compute op per layer."""
    if buffers < 1:
        raise ValueError("need at least one buffer")
    tr = EventTrace(n_layers=n_layers, meta={"synthetic": True})

    def xfer(i):
        buf, gen = (i - 1) % buffers, (i - 1) // buffers
        tr.add(WEIGHT_XFER, layer=i, tile=i, buf=buf, gen=gen, duration=t_xfer,
               waits=[ev_buffer_free(0, buf, gen - 1)] if gen else [],
               records=[ev_weights_ready(0, buf, gen)])

    for i in range(1, min(buffers, n_layers) + 1):
        xfer(i)
    for i in range(1, n_layers + 1):
        buf, gen = (i - 1) % buffers, (i - 1) // buffers
        tr.add(FORWARD, layer=i, tile=i, buf=buf, gen=gen, duration=t_comp,
               waits=[ev_weights_ready(0, buf, gen)], records=[ev_buffer_free(0, buf, gen)])
        if i + buffers <= n_layers:
            xfer(i + buffers)
    return tr


def canonical_trace(config: ModelConfig, storage: str = BF16, n_slabs: int = 12,
                    accumulation: str = "inline", eager_optim: bool = False, steps: int = 1) -> EventTrace:
    """The trace a training run issues, derived from shapes alone (no allocation).

    Multi-step traces are joined with :func:`concat_steps`, which adds the
    optimizer-to-next-transfer edges.
    """
    if accumulation not in ("inline", "lazy"):
        raise ValueError("canonical traces model inline or lazy accumulation")
    per_step = config.n_layers + 2
    traces = [_canonical_step(config, storage, n_slabs, accumulation, eager_optim, t,
                              ((t - 1) * per_step) % n_slabs) for t in range(1, steps + 1)]
    return traces[0] if steps == 1 else concat_steps(traces)


def _canonical_step(cfg: ModelConfig, storage, n_slabs, accumulation, eager, t, cursor) -> EventTrace:
    L, V, h, T = cfg.n_layers, cfg.vocab, cfg.hidden, cfg.tokens
    w_item, g_item = STORAGE_BYTES[storage][:2]
    tied = cfg.tie_embeddings
    n_block = cfg.block_params
    tile_of = (lambda u: 0 if (tied and u == L + 1) else u)
    numel_of = (lambda tile: V * h if tile in (0, L + 1) else n_block)
    consumers = defaultdict(set)
    for u in range(L + 2):
        consumers[tile_of(u)].add(u)
    n_tiles = L + 1 if tied else L + 2
    tr = EventTrace(n_layers=L, meta={"tied": tied, "storage": storage})
    gen = [0, 0, 0]
    fwd_flops = 2.0 * n_block * T

    demands = [(FORWARD, i) for i in range(1, L + 1)]
    for lo, hi in cfg.blocks():
        demands += [(RECOMPUTE, j) for j in range(lo, hi + 1)]
        demands += [(LOCAL_BACKWARD, i) for i in range(hi, lo - 1, -1)]
    issued = 0

    def prefetch(upto):
        nonlocal issued
        while issued < min(upto, len(demands)):
            k = issued
            unit, buf, g = demands[k][1], k % 2, k // 2
            tr.add(WEIGHT_XFER, layer=unit, tile=unit, buf=buf, gen=g, step=t, bytes=w_item * n_block,
                   waits=[ev_buffer_free(t, buf, g - 1)] if g else [], records=[ev_weights_ready(t, buf, g)])
            issued += 1

    def edge_in(unit):
        g = gen[EDGE]
        gen[EDGE] += 1
        tr.add(WEIGHT_XFER, layer=unit, tile=tile_of(unit), buf=EDGE, gen=g, step=t, bytes=w_item * V * h,
               waits=[ev_buffer_free(t, EDGE, g - 1)] if g else [], records=[ev_weights_ready(t, EDGE, g)])
        return g

    slab_state = ["FREE"] * n_slabs
    slab_use = [0] * n_slabs
    pending: list[tuple[int, int, int]] = []
    acc_events: dict[int, list[str]] = defaultdict(list)
    acc_units: dict[int, set] = defaultdict(set)
    cur = cursor

    def opt(tile):
        tr.add(OPT_STEP, tile=tile, step=t, numel=numel_of(tile), waits=list(acc_events[tile]),
               records=[ev_opt_done(t, tile)])

    def acc_next():
        slab, use, unit = pending.pop(0)
        tile = tile_of(unit)
        done = ev_slab_free(t, slab, use)
        tr.add(ACC, layer=unit, tile=tile, slab=slab, slab_use=use, step=t, numel=numel_of(tile),
               waits=[ev_slab_ready(t, slab, use)], records=[done])
        slab_state[slab] = "FREE"
        acc_events[tile].append(done)
        acc_units[tile].add(unit)
        if eager and acc_units[tile] == consumers[tile]:
            opt(tile)

    def evacuate(unit, buf, g, nbytes):
        nonlocal cur
        slab = cur
        while slab_state[slab] != "FREE":
            acc_next()
        cur = (cur + 1) % n_slabs
        use = slab_use[slab]
        slab_use[slab] += 1
        slab_state[slab] = "READY"
        waits = [ev_backward_done(t, unit)] + ([ev_slab_free(t, slab, use - 1)] if use else [])
        tr.add(GRAD_XFER, layer=unit, tile=tile_of(unit), buf=buf, gen=g, slab=slab, slab_use=use, step=t,
               bytes=nbytes, waits=waits, records=[ev_buffer_free(t, buf, g), ev_slab_ready(t, slab, use)])
        pending.append((slab, use, unit))
        if accumulation == "inline":
            acc_next()

    def block_op(k, kind):
        prefetch(k + 1)
        unit, buf, g = demands[k][1], k % 2, k // 2
        wait = [ev_weights_ready(t, buf, g)]
        if kind == LOCAL_BACKWARD:
            tr.add(LOCAL_BACKWARD, layer=unit, tile=unit, buf=buf, gen=g, step=t, flops=2 * fwd_flops,
                   waits=wait, records=[ev_backward_done(t, unit)])
            evacuate(unit, buf, g, g_item * n_block)
        else:
            tr.add(kind, layer=unit, tile=unit, buf=buf, gen=g, step=t, flops=fwd_flops,
                   waits=wait, records=[ev_buffer_free(t, buf, g)])
        prefetch(k + 3)

    eg = edge_in(0)
    tr.add(EMBED, layer=0, tile=0, buf=EDGE, gen=eg, step=t, waits=[ev_weights_ready(t, EDGE, eg)],
           records=[] if tied else [ev_buffer_free(t, EDGE, eg)])
    if not tied:
        eg = edge_in(L + 1)
    prefetch(2)
    k = 0
    for _ in range(L):
        block_op(k, FORWARD)
        k += 1
    tr.add(HEAD, layer=L + 1, tile=tile_of(L + 1), buf=EDGE, gen=eg, step=t, flops=6.0 * V * h * T,
           waits=[ev_weights_ready(t, EDGE, eg)], records=[ev_backward_done(t, L + 1)])
    evacuate(L + 1, EDGE, eg, g_item * V * h)
    for lo, hi in cfg.blocks():
        for _ in range(lo, hi + 1):
            block_op(k, RECOMPUTE)
            k += 1
        for _ in range(hi, lo - 1, -1):
            block_op(k, LOCAL_BACKWARD)
            k += 1
    eg = gen[EDGE]
    gen[EDGE] += 1
    tr.add(EMBED_BACKWARD, layer=0, tile=0, buf=EDGE, gen=eg, step=t,
           waits=[ev_buffer_free(t, EDGE, eg - 1)], records=[ev_backward_done(t, 0)])
    evacuate(0, EDGE, eg, g_item * V * h)
    while pending:
        acc_next()
    if not eager:
        for tile in range(n_tiles):
            opt(tile)
    return tr
