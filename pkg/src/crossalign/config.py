"""Run configuration (JSON round-trippable)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

STAGES = ("instance", "scene", "unified", "all")
ALIGNMENTS = ("base_modality", "all_pairs")
FUSION_MODES = ("as_written", "softmax")
UNIFIED_OBJECTIVES = ("unified", "combined")
VIEW_STRATEGIES = ("farthest", "uniform")


@dataclass
class RunConfig:
    dataset: str = ""
    stage: str = "all"
    alignment: str = "base_modality"
    base_modality: str = "I"
    fusion_mode: str = "as_written"
    dim: int = 768
    heads: int = 4
    layers: int = 2
    dropout: float = 0.1
    referrals_per_scene: int = 10
    n_views: int = 10
    view_strategy: str = "farthest"
    rotation_weight: float = 1.0
    voxel_size: float = 0.1
    # optimisation
    lr: float = 1e-3
    lr_min: float = 0.0
    restart_period: int = 500
    restart_mult: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    batch_scenes: int = 16
    epochs: dict = field(default_factory=lambda: {"instance": 300, "scene": 300, "unified": 300})
    max_steps: dict = field(default_factory=dict)
    tau_init: float = 0.07
    # unified stage
    floorplan_in_training: bool = True
    unified_objective: str = "unified"
    unified_all_pairs: bool = False
    # bookkeeping
    seed: int = 0
    checkpoint_every: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.stage in STAGES, f"stage must be one of {STAGES}"),
            (self.alignment in ALIGNMENTS, f"alignment must be one of {ALIGNMENTS}"),
            (self.fusion_mode in FUSION_MODES, f"fusion_mode must be one of {FUSION_MODES}"),
            (self.unified_objective in UNIFIED_OBJECTIVES,
             f"unified_objective must be one of {UNIFIED_OBJECTIVES}"),
            (self.view_strategy in VIEW_STRATEGIES, f"view_strategy must be one of {VIEW_STRATEGIES}"),
            (self.base_modality in ("I", "P", "M", "R"), "base_modality must be an instance modality"),
            (self.dim >= 8, "dim must be >= 8"),
            (self.heads >= 1 and self.dim % self.heads == 0, "dim must be divisible by heads"),
            (self.layers >= 1, "layers must be >= 1"),
            (0.0 <= self.dropout < 1.0, "dropout must be in [0, 1)"),
            (self.referrals_per_scene >= 1 and self.n_views >= 1, "t and N must be >= 1"),
            (self.voxel_size > 0, "voxel_size must be positive"),
            (self.lr > 0 and self.lr >= self.lr_min >= 0, "need lr > 0 and lr >= lr_min >= 0"),
            (self.restart_period >= 1 and self.restart_mult >= 1, "bad restart schedule"),
            (self.batch_scenes >= 1, "batch_scenes must be >= 1"),
            (self.tau_init > 0, "tau_init must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def stage_steps(self, stage: str, n_train: int) -> int:
        per_epoch = -(-n_train // self.batch_scenes)
        steps = int(self.epochs.get(stage, 300)) * per_epoch
        cap = self.max_steps.get(stage)
        return min(steps, int(cap)) if cap is not None else steps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
