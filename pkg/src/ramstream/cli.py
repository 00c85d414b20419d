"""Command-line driver: ``plan``, ``train``, ``simulate``, ``trace`` (and a hidden ``oracle-train``).

Exit codes: 0 ok, 2 configuration or input error, 3 device memory budget
exceeded, 4 trace protocol violations.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

from .arena import ArenaOOM
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import copy_task_batch, copy_task_stream
from .engine import StreamingEngine
from .host_store import build_store
from .oracle import oracle_train
from .planner import feasibility, format_plan, format_scaling, scaling_report
from .scheduler import (TimingModel, canonical_trace, simulate, throughput_report, timeline_jsonl,
                        validate_trace)
from .trace import COMPUTE, D2H, H2D, HOST, EventTrace, concat_steps

EXIT_OK, EXIT_CONFIG, EXIT_OOM, EXIT_VIOLATION = 0, 2, 3, 4


class InputError(ValueError):
    """Unreadable or malformed input file (trace or timeline)."""


def _write_atomic(path: str | os.PathLike, text: str):
    """Write via a temp file in the same directory so a failure never leaves a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# -- plan ---------------------------------------------------------------------

def cmd_plan(args) -> int:
    cfg = load_config(args.config)
    storage = cfg.run.storage
    if cfg.sweep is not None:
        table = scaling_report(cfg.model, cfg.sweep, cfg.hardware, storage)
        text, report = format_scaling(table), table
    else:
        plan = feasibility(cfg.model, cfg.hardware, storage, cfg.run.n_slabs, args.slack, args.volume_mode)
        text, report = format_plan(plan), plan.to_dict()
    if args.out:
        _write_atomic(args.out, _dump(report))
    sys.stdout.write(text)
    return EXIT_OK


# -- train --------------------------------------------------------------------

def _run_settings(cfg: RunConfig, args):
    run = cfg.run
    return {
        "steps": run.steps if args.steps is None else args.steps,
        "log": args.log or run.log_path,
        "checkpoint": args.checkpoint or run.checkpoint_path,
        "trace": args.trace or run.trace_path,
        "eager": run.eager_optim or args.eager_optim,
    }


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    opts = _run_settings(cfg, args)
    model, run = cfg.model, cfg.run
    if args.resume:
        store = load_checkpoint(args.resume, model)
        if store.storage != run.storage:
            raise ConfigError(f"checkpoint storage {store.storage} differs from run.storage {run.storage}")
    else:
        store = build_store(model, run.seed, run.storage)
    engine = StreamingEngine(store, model, cfg.hyper, n_slabs=run.n_slabs, accumulation=run.accumulation,
                             eager_optim=opts["eager"], device_bytes=cfg.hardware.device_bytes)
    rows, traces, ledgers = [], [], []
    try:
        for _ in range(opts["steps"]):
            step = store.step + 1
            tokens, targets = copy_task_batch(run.seed, step, model.vocab, model.batch, model.seq)
            res = engine.train_step(tokens, targets)
            rows.append({"step": step, "loss": res.loss, "arena_peak": res.arena_peak,
                         "host_total": res.host["total"], "h2d_bytes": res.h2d_bytes,
                         "d2h_bytes": res.d2h_bytes, "stalls": res.stalls})
            if opts["trace"]:
                traces.append(res.trace)
                ledgers.append(res.ledger["peak"])
    finally:
        engine.close()
    log_text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if opts["log"]:
        _write_atomic(opts["log"], log_text)
    else:
        sys.stdout.write(log_text)
    if opts["trace"] and traces:
        joined = traces[0] if len(traces) == 1 else concat_steps(traces)
        joined.meta["ledger_peaks"] = ledgers
        _write_atomic(opts["trace"], joined.to_jsonl())
    if opts["checkpoint"]:
        save_checkpoint(store, opts["checkpoint"])
    if rows:
        print(f"trained {len(rows)} steps: loss {rows[0]['loss']:.4f} -> {rows[-1]['loss']:.4f}", file=sys.stderr)
    return EXIT_OK


# -- simulate -----------------------------------------------------------------

def _read_trace(path) -> EventTrace:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read trace: {exc}") from None
    try:
        return EventTrace.from_jsonl(text)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.trace:
        trace = _read_trace(args.trace)
    else:
        mode = "lazy" if cfg.run.accumulation == "lazy" else "inline"
        trace = canonical_trace(cfg.model, cfg.run.storage, cfg.run.n_slabs, mode, cfg.run.eager_optim,
                                steps=args.steps)
    violations = validate_trace(trace)
    if violations:
        for v in violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_VIOLATION
    timeline = simulate(trace, TimingModel.from_hardware(cfg.hardware))
    report = throughput_report(timeline)
    text = timeline_jsonl(timeline, report)
    if args.out:
        _write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    summary = {k: report[k] for k in ("makespan", "sim_tflops", "bound", "bubble")}
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return EXIT_OK


# -- trace rendering ------------------------------------------------------------

_GLYPH = {"WeightXfer": "W", "Embed": "E", "Forward": "F", "Head": "H", "Recompute": "R",
          "LocalBackward": "B", "EmbedBackward": "e", "GradXfer": "G", "Acc": "a", "OptStep": "o"}
_ROWS = (H2D, COMPUTE, D2H)


def read_timeline(text: str) -> list[dict]:
    """Parse simulate output; raises :class:`InputError` naming the bad line."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(row, dict):
            raise InputError(f"line {lineno}: expected an object")
        if "summary" in row:
            continue
        missing = {"stream", "kind", "layer", "t_start_us", "t_end_us"} - set(row)
        if missing:
            raise InputError(f"line {lineno}: missing field(s) {', '.join(sorted(missing))}")
        if not row["t_end_us"] >= row["t_start_us"]:
            raise InputError(f"line {lineno}: span ends before it starts")
        rows.append(row)
    return rows


def render_gantt(rows: list[dict], width: int = 80) -> str:
    """Text gantt: one bar per device stream, per-stream op order, host work in a footer."""
    span = max((r["t_end_us"] for r in rows), default=0.0)
    lines = [f"{'stream':<8} | 0 .. {span:.3f} us, {width} columns"]
    if not rows:
        return "\n".join(lines) + "\n"
    scale = width / span if span > 0 else 0.0
    for stream in _ROWS:
        bar = [" "] * width
        for r in (r for r in rows if r["stream"] == stream):
            a = min(int(r["t_start_us"] * scale), width - 1)
            b = max(a + 1, min(int(r["t_end_us"] * scale), width))
            bar[a:b] = _GLYPH.get(r["kind"], "?") * (b - a)
        lines.append(f"{stream:<8} |{''.join(bar)}|")
    for stream in _ROWS:
        seq = [f"{_GLYPH.get(r['kind'], '?')}{r['layer']}" for r in rows if r["stream"] == stream]
        lines.append(f"{stream:<8} order: {' '.join(seq)}")
    host = [r for r in rows if r["stream"] == HOST]
    busy = sum(r["t_end_us"] - r["t_start_us"] for r in host)
    kinds = {k: sum(1 for r in host if r["kind"] == k) for k in ("Acc", "OptStep")}
    lines.append(f"host: {len(host)} ops (Acc {kinds['Acc']}, OptStep {kinds['OptStep']}), busy {busy:.3f} us")
    return "\n".join(lines) + "\n"


def cmd_trace(args) -> int:
    try:
        text = Path(args.file).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {args.file}: {exc}") from None
    sys.stdout.write(render_gantt(read_timeline(text), args.width))
    return EXIT_OK


# -- oracle-train ----------------------------------------------------------------

def cmd_oracle_train(args) -> int:
    cfg = load_config(args.config)
    model, run = cfg.model, cfg.run
    steps = run.steps if args.steps is None else args.steps
    params = build_store(model, run.seed, "fp32").params_dict()
    data = copy_task_stream(run.seed, model.vocab, model.batch, model.seq)
    curve, _ = oracle_train(params, data, cfg.hyper, steps, model)
    for step, loss in enumerate(curve, 1):
        print(json.dumps({"step": step, "loss": loss}))
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ramstream", description="Layer-streaming training driver.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{plan,train,simulate,trace}")

    p = sub.add_parser("plan", help="memory and bandwidth feasibility report")
    p.add_argument("config")
    p.add_argument("--out", help="write the machine-readable report (JSON) here")
    p.add_argument("--slack", type=float, default=1.0)
    p.add_argument("--volume-mode", choices=("idealized", "measured"), default="idealized")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="train on the synthetic copy task")
    p.add_argument("config")
    p.add_argument("--steps", type=int)
    p.add_argument("--log", help="JSONL step log (default: stdout)")
    p.add_argument("--checkpoint", help="HLM1 checkpoint written at the end")
    p.add_argument("--resume", help="HLM1 checkpoint to continue from")
    p.add_argument("--trace", help="JSONL event trace of every step")
    p.add_argument("--eager-optim", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="simulate stream timing of a trace")
    p.add_argument("config")
    p.add_argument("--trace", help="engine trace (default: generated from the config)")
    p.add_argument("--steps", type=int, default=1, help="steps in the generated trace")
    p.add_argument("--out", help="timeline JSONL (default: stdout)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("trace", help="render a simulated timeline as a text gantt")
    p.add_argument("file")
    p.add_argument("--width", type=int, default=80)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("oracle-train")  # no help= keeps it out of the listing
    p.add_argument("config")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_oracle_train)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArenaOOM as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OOM


if __name__ == "__main__":
    sys.exit(main())
