"""Configuration records shared by the store, arena, engine, planner and CLI."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


BF16 = "bf16"
FP32 = "fp32"
STORAGE_MODES = (BF16, FP32)

# bytes per element for (weights, grads, moment_m, moment_v)
STORAGE_BYTES = {
    BF16: (2, 2, 4, 4),
    FP32: (4, 4, 4, 4),
}


def bytes_per_param(storage: str) -> int:
    return sum(STORAGE_BYTES[storage])


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the decoder-only model plus the per-step batch geometry.

    ``params`` is a planner-only override for the total parameter count; when
    set, the model cannot be allocated.
    """

    n_layers: int
    hidden: int
    ffn: int
    vocab: int
    seq: int = 16
    batch: int = 1
    ckpt_interval: int = 1
    tie_embeddings: bool = False
    params: int | None = None

    def __post_init__(self):
        for name in ("n_layers", "hidden", "ffn", "vocab", "seq", "batch", "ckpt_interval"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.ckpt_interval > self.n_layers:
            raise ConfigError(
                f"model.ckpt_interval ({self.ckpt_interval}) exceeds n_layers ({self.n_layers})"
            )
        if self.params is not None and (isinstance(self.params, bool) or self.params < 0):
            raise ConfigError(f"model.params must be >= 0, got {self.params!r}")

    # -- shape walker ---------------------------------------------------------

    @property
    def block_params(self) -> int:
        h, f = self.hidden, self.ffn
        return 4 * h * h + 3 * h * f + 2 * h

    @property
    def edge_params(self) -> int:
        """Parameters of the embedding table (and of an untied head)."""
        return self.vocab * self.hidden

    @property
    def total_params(self) -> int:
        if self.params is not None:
            return int(self.params)
        n_edge = 1 if self.tie_embeddings else 2
        return self.n_layers * self.block_params + n_edge * self.edge_params

    @property
    def tokens(self) -> int:
        return self.batch * self.seq

    @property
    def n_anchors(self) -> int:
        """Checkpoint anchors alive at the end of the forward pass."""
        return math.ceil(self.n_layers / self.ckpt_interval) + 1

    def anchor_layers(self) -> list[int]:
        idx = list(range(0, self.n_layers + 1, self.ckpt_interval))
        if idx[-1] != self.n_layers:
            idx.append(self.n_layers)
        return idx

    def blocks(self) -> list[tuple[int, int]]:
        """Recompute blocks as inclusive (first, last) layer ranges, top first.

        Block b spans layers bK+1 .. min((b+1)K, L); the b = L/K block is empty
        when K divides L and is omitted.
        """
        K, L = self.ckpt_interval, self.n_layers
        out = []
        for b in range(L // K, -1, -1):
            lo, hi = b * K + 1, min((b + 1) * K, L)
            if lo <= hi:
                out.append((lo, hi))
        return out

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class HardwareConfig:
    host_bytes: float = 512e9
    device_bytes: float = 80e9
    pcie_bandwidth: float = 26e9
    device_flops: float = 300e12
    cpu_optim_rate: float = 2e9
    pageable_penalty: float = 2.0

    def __post_init__(self):
        for f_ in dataclasses.fields(self):
            value = getattr(self, f_.name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                raise ConfigError(f"hardware.{f_.name} must be > 0, got {value!r}")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"hyper.lr must be > 0, got {self.lr!r}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"hyper.{name} must lie in [0, 1)")
        if not self.eps > 0 or self.weight_decay < 0:
            raise ConfigError("hyper.eps must be > 0 and hyper.weight_decay >= 0")


@dataclass(frozen=True)
class RunSettings:
    steps: int = 200
    seed: int = 0
    storage: str = BF16
    eager_optim: bool = False
    n_slabs: int = 12
    accumulation: str = "inline"
    trace_path: str | None = None
    log_path: str | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.storage not in STORAGE_MODES:
            raise ConfigError(f"run.storage must be one of {STORAGE_MODES}, got {self.storage!r}")
        if self.accumulation not in ("inline", "lazy", "thread"):
            raise ConfigError(f"run.accumulation must be inline|lazy|thread, got {self.accumulation!r}")
        if self.steps < 0 or self.n_slabs < 1:
            raise ConfigError("run.steps must be >= 0 and run.n_slabs >= 1")


@dataclass(frozen=True)
class SweepConfig:
    kind: str
    values: tuple[float, ...]
    device_budget: float | None = None

    def __post_init__(self):
        if self.kind not in ("depth", "width"):
            raise ConfigError(f"sweep.kind must be depth|width, got {self.kind!r}")
        if not self.values:
            raise ConfigError("sweep.values must be non-empty")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    hardware: HardwareConfig = field(default_factory=HardwareConfig)
    hyper: AdamConfig = field(default_factory=AdamConfig)
    run: RunSettings = field(default_factory=RunSettings)
    sweep: SweepConfig | None = None


def _build(cls, section: str, data: Any):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be an object")
    names = {f_.name for f_ in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    kwargs = dict(data)
    if cls is SweepConfig and "values" in kwargs:
        kwargs["values"] = tuple(kwargs["values"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"section '{section}': {exc}") from None


def load_config(source: str | os.PathLike | dict) -> RunConfig:
    """Parse and validate a run configuration (JSON file or already-decoded dict)."""
    if isinstance(source, dict):
        data = source
    else:
        try:
            data = json.loads(Path(source).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    sections = {"model": ModelConfig, "hardware": HardwareConfig, "hyper": AdamConfig,
                "run": RunSettings, "sweep": SweepConfig}
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "model" not in data:
        raise ConfigError("missing required section 'model'")
    parsed = {name: _build(cls, name, data[name]) for name, cls in sections.items() if name in data}
    seed = os.environ.get("HLM_SEED")
    if seed is not None:
        try:
            seed_value = int(seed)
        except ValueError:
            raise ConfigError(f"HLM_SEED must be an integer, got {seed!r}") from None
        parsed["run"] = dataclasses.replace(parsed.get("run", RunSettings()), seed=seed_value)
    return RunConfig(**parsed)
