"""Closed-form memory and bandwidth feasibility for streamed training.

The formulas here are written from the model shapes directly; they do not
call into the allocator code. Tests compare them against the live ledgers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .config import BF16, STORAGE_BYTES, HardwareConfig, ModelConfig, SweepConfig

FEASIBLE = "FEASIBLE"
HOST_BOUND = "HOST_BOUND"
DEVICE_BOUND = "DEVICE_BOUND"
TRANSFER_BOUND = "TRANSFER_BOUND"


def min_host_bytes(n_params: int, storage: str = BF16) -> int:
    """Persistent host bytes: weights, gradients and both Adam moments."""
    return sum(STORAGE_BYTES[storage]) * int(n_params)


def host_bytes_estimate(n_params: int, slab_bytes: int, p_max: int, storage: str = BF16) -> dict[str, int]:
    persistent = min_host_bytes(n_params, storage)
    staging = 2 * int(p_max)
    return {"persistent": persistent, "slabs": int(slab_bytes), "staging": staging,
            "total": persistent + int(slab_bytes) + staging}


def device_bound(p_max: int, k_ckpt: int, a_max: int, n_anchors: int, a_ckpt: int,
                 workspace: int) -> dict[str, int]:
    """Device bytes: two stream buffers, one block of activations per layer in a
    checkpoint interval, the anchor states, and the fixed workspace.

    ``anchors`` is the term that grows with ceil(L / K_ckpt); it is reported
    separately so the depth-free part can be read off directly.
    """
    terms = {
        "stream_buffers": 2 * p_max,
        "activations": k_ckpt * a_max,
        "anchors": n_anchors * a_ckpt,
        "workspace": workspace,
    }
    terms["total"] = sum(terms.values())
    terms["depth_free"] = terms["total"] - terms["anchors"]
    return terms


@dataclass(frozen=True)
class ShapeTerms:
    """Per-layer sizes derived from a model config."""

    n_block: int
    p_max: int          # widest streamed block, weight bytes
    unit_max: int       # widest host tile (embedding/head included), weight bytes
    grad_unit_max: int
    a_max: int
    a_ckpt: int
    workspace: int
    n_anchors: int


def shape_terms(cfg: ModelConfig, storage: str = BF16) -> ShapeTerms:
    w, g = STORAGE_BYTES[storage][:2]
    h, f, V, L, K = cfg.hidden, cfg.ffn, cfg.vocab, cfg.n_layers, cfg.ckpt_interval
    B, S = cfg.batch, cfg.seq
    n_block = 4 * h * h + 3 * h * f + 2 * h
    widest = max(n_block, V * h)
    a_ckpt = 4 * B * S * h
    return ShapeTerms(
        n_block=n_block,
        p_max=w * n_block,
        unit_max=w * widest,
        grad_unit_max=g * widest,
        # x, xn1, q, k, v, ctx, h_mid, xn2 (h each), up, gate (f each), probs (S), two rstd
        a_max=4 * B * S * (8 * h + 2 * f + S + 2),
        a_ckpt=a_ckpt,
        workspace=2 * a_ckpt + w * V * h + 2 * 4 * B * S * V,
        n_anchors=-(-L // K) + 1,
    )


def device_bound_for(cfg: ModelConfig, storage: str = BF16) -> dict[str, int]:
    t = shape_terms(cfg, storage)
    return device_bound(t.p_max, cfg.ckpt_interval, t.a_max, t.n_anchors, t.a_ckpt, t.workspace)


def host_estimate_for(cfg: ModelConfig, storage: str = BF16, n_slabs: int = 12) -> dict[str, int]:
    t = shape_terms(cfg, storage)
    return host_bytes_estimate(cfg.total_params, n_slabs * t.grad_unit_max, t.unit_max, storage)


def streaming_volume(p_bytes: int = 0, mode: str = "idealized", config: ModelConfig | None = None,
                     storage: str = BF16) -> tuple[int, int]:
    """Per-step (H2D, D2H) bytes.

    ``idealized`` returns ``(p_bytes, p_bytes)``: every weight in, every
    gradient out, once. ``measured`` counts what a step actually moves: each
    block is streamed three times (forward, recompute, local backward), the
    edge tables once each (once in total when tied), and one gradient per
    block plus the head and embedding gradients.
    """
    if mode == "idealized":
        return int(p_bytes), int(p_bytes)
    if mode != "measured":
        raise ValueError(f"unknown volume mode {mode!r}")
    if config is None:
        raise ValueError("measured volume needs the model config")
    w, g = STORAGE_BYTES[storage][:2]
    L, n = config.n_layers, config.block_params
    edge = config.vocab * config.hidden
    h2d = w * (3 * L * n + edge * (1 if config.tie_embeddings else 2))
    d2h = g * (L * n + 2 * edge)
    return h2d, d2h


def step_flops(cfg: ModelConfig) -> dict[str, float]:
    """Modeled flops of one step: forward 2nT per block, recompute 1x, backward 2x, head 6VhT."""
    fwd = 2.0 * cfg.block_params * cfg.tokens
    terms = {
        "forward": cfg.n_layers * fwd,
        "recompute": cfg.n_layers * fwd,
        "backward": cfg.n_layers * 2 * fwd,
        "head": 6.0 * cfg.vocab * cfg.hidden * cfg.tokens,
    }
    terms["total"] = sum(terms.values())
    return terms


@dataclass
class PlanReport:
    P: int
    M_cpu_min: int
    M_cpu_est: dict
    M_gpu_bound: dict
    V_h2d: int
    V_d2h: int
    volume_mode: str
    V_measured: tuple[int, int]
    T_comp: float
    t_transfer: float
    transfer_ratio: float
    transfer_ok: bool
    layer_overlap: list[dict]
    checks: dict
    verdict: str
    slack: float = 1.0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def feasibility(model: ModelConfig, hw: HardwareConfig, storage: str = BF16, n_slabs: int = 12,
                slack: float = 1.0, volume_mode: str = "idealized") -> PlanReport:
    """Check host memory, device memory and bandwidth; the verdict is the first failing one."""
    P = model.total_params
    w = STORAGE_BYTES[storage][0]
    host = host_estimate_for(model, storage, n_slabs)
    dev = device_bound_for(model, storage)
    measured = streaming_volume(config=model, storage=storage, mode="measured")
    v_h2d, v_d2h = measured if volume_mode == "measured" else streaming_volume(w * P)
    flops = step_flops(model)
    t_comp = flops["total"] / hw.device_flops
    t_xfer = max(v_h2d, v_d2h) / hw.pcie_bandwidth
    ratio = t_xfer / t_comp if t_comp > 0 else math.inf
    transfer_ok = ratio <= slack

    t_layer_xfer = w * model.block_params / hw.pcie_bandwidth
    t_layer_comp = 2.0 * model.block_params * model.tokens / hw.device_flops
    overlap = []
    for i in range(1, model.n_layers + 1):
        if i == 1:
            # nothing runs before the first block's transfer: pipeline fill, not judged
            overlap.append({"layer": 1, "t_xfer": t_layer_xfer, "t_prev_comp": 0.0, "ratio": None, "ok": None})
            continue
        r = t_layer_xfer / t_layer_comp
        overlap.append({"layer": i, "t_xfer": t_layer_xfer, "t_prev_comp": t_layer_comp,
                        "ratio": r, "ok": r <= slack})
    layers_ok = all(row["ok"] is not False for row in overlap)

    checks = {
        "host": host["total"] <= hw.host_bytes,
        "device": dev["total"] <= hw.device_bytes,
        "transfer_global": transfer_ok,
        "transfer_layers": layers_ok,
    }
    if not checks["host"]:
        verdict = HOST_BOUND
    elif not checks["device"]:
        verdict = DEVICE_BOUND
    elif not (transfer_ok and layers_ok):
        verdict = TRANSFER_BOUND
    else:
        verdict = FEASIBLE
    notes = ["device bound includes an anchor term, one hidden state per checkpoint anchor"]
    if volume_mode == "idealized":
        notes.append(f"idealized volume ignores recompute re-streaming; measured H2D is {measured[0]} bytes")
    return PlanReport(P=P, M_cpu_min=min_host_bytes(P, storage), M_cpu_est=host, M_gpu_bound=dev,
                      V_h2d=v_h2d, V_d2h=v_d2h, volume_mode=volume_mode, V_measured=measured,
                      T_comp=t_comp, t_transfer=t_xfer, transfer_ratio=ratio, transfer_ok=transfer_ok,
                      layer_overlap=overlap, checks=checks, verdict=verdict, slack=slack, notes=notes)


def scaling_report(base: ModelConfig, sweep: SweepConfig, hw: HardwareConfig | None = None,
                   storage: str = BF16) -> dict:
    """Depth sweep (values are layer counts) or width sweep (values multiply h and f).

    ``M_gpu_bound`` in each row is the depth-free part of the device bound;
    the anchor states are listed beside it in ``anchor_bytes``.
    """
    hw = hw or HardwareConfig()
    rows = []
    threshold = None
    for value in sweep.values:
        if sweep.kind == "depth":
            cfg = base.replace(n_layers=int(value), ckpt_interval=min(base.ckpt_interval, int(value)))
            label = f"L={int(value)}"
        else:
            cfg = base.replace(hidden=int(round(base.hidden * value)), ffn=int(round(base.ffn * value)))
            label = f"{value:g}x"
        t = shape_terms(cfg, storage)
        dev = device_bound_for(cfg, storage)
        plan = feasibility(cfg, hw, storage)
        # the fit test charges the anchors too
        fits = None if sweep.device_budget is None else dev["total"] <= sweep.device_budget
        if fits is False and threshold is None:
            threshold = label
        rows.append({
            "label": label, "value": value, "layers": cfg.n_layers, "hidden": cfg.hidden, "ffn": cfg.ffn,
            "P": cfg.total_params, "P_max": t.p_max, "M_gpu_bound": dev["depth_free"],
            "anchor_bytes": dev["anchors"], "M_gpu_total": dev["total"],
            "M_cpu_min": min_host_bytes(cfg.total_params, storage),
            "layer_overlap_ok": plan.checks["transfer_layers"], "fits_device": fits,
        })
    return {"kind": sweep.kind, "device_budget": sweep.device_budget, "rows": rows, "oom_threshold": threshold}


# ---------------------------------------------------------------------------
# Text rendering
# ---------------------------------------------------------------------------

def fmt_bytes(n: float) -> str:
    for unit, scale in (("TB", 1e12), ("GB", 1e9), ("MB", 1e6), ("KB", 1e3)):
        if abs(n) >= scale:
            return f"{n / scale:.1f} {unit}"
    return f"{int(n)} B"


def format_plan(report: PlanReport) -> str:
    lines = [
        f"parameters P                     {report.P:,}",
        f"minimum host memory (12P)        {fmt_bytes(report.M_cpu_min)}",
        f"host estimate (12P+slabs+stage)  {fmt_bytes(report.M_cpu_est['total'])}",
        f"device bound                     {fmt_bytes(report.M_gpu_bound['total'])}"
        f"  (anchors {fmt_bytes(report.M_gpu_bound['anchors'])})",
        f"H2D / D2H per step ({report.volume_mode})  {fmt_bytes(report.V_h2d)} / {fmt_bytes(report.V_d2h)}",
        f"measured-mode H2D / D2H          {fmt_bytes(report.V_measured[0])} / {fmt_bytes(report.V_measured[1])}",
        f"modeled compute per step         {report.T_comp:.4g} s",
        f"transfer time per direction      {report.t_transfer:.4g} s  (ratio {report.transfer_ratio:.3g},"
        f" slack {report.slack:g})",
        f"per-layer prefetch hidden        {report.checks['transfer_layers']}",
        f"verdict                          {report.verdict}",
    ]
    return "\n".join(lines) + "\n"


def format_scaling(table: dict) -> str:
    head = (f"{'point':>8} {'layers':>6} {'hidden':>7} {'ffn':>7} {'P':>16} {'P_max':>10} {'device':>10}"
            f" {'anchors':>10} {'host min':>10}")
    if table["device_budget"] is not None:
        head += "  fits"
    lines = [head]
    for r in table["rows"]:
        line = (f"{r['label']:>8} {r['layers']:>6} {r['hidden']:>7} {r['ffn']:>7} {r['P']:>16,} "
                f"{fmt_bytes(r['P_max']):>10} {fmt_bytes(r['M_gpu_bound']):>10} {fmt_bytes(r['anchor_bytes']):>10}"
                f" {fmt_bytes(r['M_cpu_min']):>10}")
        if r["fits_device"] is not None:
            line += "  " + ("yes" if r["fits_device"] else "OOM")
        lines.append(line)
    if table["device_budget"] is not None:
        lines.append(f"device budget {fmt_bytes(table['device_budget'])}: "
                     f"first OOM at {table['oom_threshold'] or 'none'}")
    return "\n".join(lines) + "\n"
