"""Layer-streaming training of decoder-only models with a host-resident master copy.

Persistent state (weights, gradients, Adam moments) lives in host memory; a
fixed-size device arena holds one or two blocks at a time.
"""

from .config import (AdamConfig, ConfigError, HardwareConfig, ModelConfig, RunConfig, RunSettings,
                     SweepConfig, load_config)
from .engine import StepResult, StreamingEngine
from .estimator import ReferenceTrainer, StreamingTrainer
from .host_store import MasterStore, build_store

__version__ = "0.1.0"

__all__ = [
    "AdamConfig", "ConfigError", "HardwareConfig", "ModelConfig", "RunConfig", "RunSettings",
    "SweepConfig", "load_config", "StepResult", "StreamingEngine", "ReferenceTrainer",
    "StreamingTrainer", "MasterStore", "build_store",
]
