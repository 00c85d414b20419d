"""Logical event traces: stream operations with explicit event dependencies.

Ops are listed in issue order. Within one stream they execute FIFO; across
streams the only ordering is through named events an op ``waits`` on and
``records``. Event names encode the protocol they belong to so the validator
can report violations by rule.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

COMPUTE, H2D, D2H, HOST = "COMPUTE", "H2D", "D2H", "HOST"
STREAMS = (H2D, COMPUTE, D2H, HOST)

# op kinds
WEIGHT_XFER = "WeightXfer"
EMBED = "Embed"
FORWARD = "Forward"
HEAD = "Head"
RECOMPUTE = "Recompute"
LOCAL_BACKWARD = "LocalBackward"
EMBED_BACKWARD = "EmbedBackward"
GRAD_XFER = "GradXfer"
ACC = "Acc"
OPT_STEP = "OptStep"

KIND_STREAM = {
    WEIGHT_XFER: H2D, EMBED: COMPUTE, FORWARD: COMPUTE, HEAD: COMPUTE, RECOMPUTE: COMPUTE,
    LOCAL_BACKWARD: COMPUTE, EMBED_BACKWARD: COMPUTE, GRAD_XFER: D2H, ACC: HOST, OPT_STEP: HOST,
}
# kinds that read weights out of a buffer generation
WEIGHT_READERS = (EMBED, FORWARD, HEAD, RECOMPUTE, LOCAL_BACKWARD)
# kinds that fill a buffer generation
PRODUCERS = (WEIGHT_XFER, EMBED_BACKWARD)


def ev_weights_ready(step, buf, gen):
    return f"weights_ready[buf{buf}#{gen}]@{step}"


def ev_buffer_free(step, buf, gen):
    return f"buffer_free[buf{buf}#{gen}]@{step}"


def ev_backward_done(step, unit):
    return f"backward_done[{unit}]@{step}"


def ev_slab_ready(step, slab, use):
    return f"slab_ready[{slab}#{use}]@{step}"


def ev_slab_free(step, slab, use):
    return f"slab_free[{slab}#{use}]@{step}"


def ev_opt_done(step, tile):
    return f"opt_done[{tile}]@{step}"


def event_rule(name: str) -> str:
    return name.split("[", 1)[0]


@dataclass
class StreamOp:
    id: int
    stream: str
    kind: str
    layer: int | None = None     # logical unit: 0 embed, 1..L blocks, L+1 head
    tile: int | None = None      # physical host tile
    buf: int | None = None
    gen: int | None = None
    slab: int | None = None
    slab_use: int | None = None
    step: int = 0
    bytes: int = 0
    flops: float = 0.0
    numel: int = 0
    pinned: bool = True
    duration: float | None = None  # explicit override (synthetic traces)
    waits: list[str] = field(default_factory=list)
    records: list[str] = field(default_factory=list)

    @property
    def label(self) -> str:
        return f"{self.kind}({self.layer})" if self.layer is not None else self.kind


@dataclass
class EventTrace:
    ops: list[StreamOp] = field(default_factory=list)
    n_layers: int = 0
    meta: dict = field(default_factory=dict)

    def add(self, kind: str, **kw) -> StreamOp:
        op = StreamOp(id=len(self.ops), stream=KIND_STREAM[kind], kind=kind, **kw)
        self.ops.append(op)
        return op

    def __len__(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    def count(self, kind: str) -> int:
        return sum(op.kind == kind for op in self.ops)

    def by_kind(self, kind: str) -> list[StreamOp]:
        return [op for op in self.ops if op.kind == kind]

    def copy(self) -> "EventTrace":
        ops = [replace(op, waits=list(op.waits), records=list(op.records)) for op in self.ops]
        return EventTrace(ops, self.n_layers, dict(self.meta))

    def renumber(self) -> "EventTrace":
        """Reassign ids to match current list order."""
        for i, op in enumerate(self.ops):
            op.id = i
        return self

    # -- serialisation -----------------------------------------------------------

    def to_jsonl(self) -> str:
        head = json.dumps({"trace": {"n_layers": self.n_layers, **self.meta}}, sort_keys=True)
        rows = [json.dumps(asdict(op), sort_keys=True) for op in self.ops]
        return "\n".join([head, *rows]) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EventTrace":
        trace = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if "trace" in row:
                meta = dict(row["trace"])
                trace.n_layers = meta.pop("n_layers", 0)
                trace.meta = meta
                continue
            try:
                trace.ops.append(StreamOp(**row))
            except TypeError as exc:
                raise ValueError(f"line {lineno}: not a stream op ({exc})") from None
        return trace


def concat_steps(traces: list[EventTrace]) -> EventTrace:
    """Join per-step traces into one multi-step trace.

    Adds the cross-step edges: a step's first producer into each buffer (and
    first transfer into each slab) waits for the previous step's last release
    of it, and every weight transfer of a tile waits for that tile's
    optimizer update.
    """
    out = EventTrace(n_layers=traces[0].n_layers if traces else 0,
                     meta=dict(traces[0].meta) if traces else {})
    last_free: dict[int, str] = {}
    last_slab: dict[int, str] = {}
    last_opt: dict[int, str] = {}
    for tr in traces:
        first_seen: set[int] = set()
        first_slab: set[int] = set()
        step_free: dict[int, str] = {}
        step_slab: dict[int, str] = {}
        step_opt: dict[int, str] = {}
        for op in tr.copy().ops:
            if op.kind in PRODUCERS and op.buf not in first_seen:
                first_seen.add(op.buf)
                if op.buf in last_free:
                    op.waits.append(last_free[op.buf])
            if op.kind == GRAD_XFER and op.slab not in first_slab:
                first_slab.add(op.slab)
                if op.slab in last_slab:
                    op.waits.append(last_slab[op.slab])
            if op.kind == WEIGHT_XFER and op.tile in last_opt:
                op.waits.append(last_opt[op.tile])
            for ev in op.records:
                if event_rule(ev) == "buffer_free":
                    step_free[op.buf] = ev
                elif event_rule(ev) == "slab_free":
                    step_slab[op.slab] = ev
                elif event_rule(ev) == "opt_done":
                    step_opt[op.tile] = ev
            op.id = len(out.ops)
            out.ops.append(op)
        last_free.update(step_free)
        last_slab.update(step_slab)
        last_opt = step_opt or last_opt
    return out
