"""Run configuration: a JSON document mirroring TrainConfig field-for-field."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .network import ModelConfig, VARIANT_PRUNE_STEP, variant_config


@dataclass
class TrainConfig:
    dataset: str
    out_dir: str
    mode: str = "prune"  # "prune" | "retrain"
    variant: Optional[str] = None  # S | B | L; None uses the custom model block
    model: Optional[dict] = None  # ModelConfig kwargs for custom architectures
    architecture: Optional[str] = None  # descriptor JSON consumed by retrain mode
    num_classes: int = 3
    loss: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=lambda: {"kind": "adamw", "lr": 1e-3})
    batch_size: int = 2
    patch_size: tuple[int, int, int] = (16, 16, 16)
    epochs: int = 50
    iterations_per_epoch: int = 50
    calibration_count: int = 16  # desk-scale; use ~100 for full-scale runs
    initial_p: Optional[int] = None
    convergence_window: int = 10
    improvement_threshold: float = 0.01
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 0  # 0: only event-forced and final checkpoints

    def __post_init__(self):
        if self.mode not in ("prune", "retrain"):
            raise ConfigError(f"mode must be 'prune' or 'retrain', got {self.mode!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.iterations_per_epoch < 1:
            raise ConfigError("batch_size, epochs, and iterations_per_epoch must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        self.patch_size = tuple(int(v) for v in self.patch_size)
        if self.mode == "retrain" and not self.architecture:
            raise ConfigError("retrain mode requires an architecture descriptor path")

    def model_config(self) -> ModelConfig:
        if self.variant is not None:
            return variant_config(self.variant, self.num_classes)
        if self.model is None:
            raise ConfigError("provide either a variant or a custom model block")
        kwargs = dict(self.model)
        kwargs.setdefault("num_classes", self.num_classes)
        kwargs["channels"] = tuple(kwargs["channels"])
        kwargs["kernels"] = tuple(tuple(k) for k in kwargs["kernels"])
        return ModelConfig(**kwargs)

    def prune_step(self) -> int:
        if self.initial_p is not None:
            return self.initial_p
        return VARIANT_PRUNE_STEP.get(self.variant, 1)

    def to_json(self) -> str:
        doc = asdict(self)
        doc["patch_size"] = list(self.patch_size)
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, path_or_text) -> "TrainConfig":
        p = Path(str(path_or_text))
        text = p.read_text() if p.exists() else str(path_or_text)
        doc = json.loads(text)
        return cls(**doc)


def load_config(path) -> TrainConfig:
    return TrainConfig.from_json(Path(path))
