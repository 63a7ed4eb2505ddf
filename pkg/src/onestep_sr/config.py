"""Resolved training configuration and its YAML layering."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .dasm import DasmConfig
from .degradation import DegradationRecipe
from .losses import LossWeights


@dataclass
class TrainConfig:
    seed: int = 0

    # autoencoder
    ae_width: int = 32
    latent_channels: int = 4
    reduction: int = 4
    ae_steps: int = 1500
    ae_batch: int = 16
    ae_lr: float = 2e-3
    ae_psnr_threshold: float = 28.0

    # teacher
    teacher_width: int = 48
    teacher_blocks: int = 2
    teacher_emb: int = 64
    num_classes: int = 4
    teacher_steps: int = 3000
    teacher_batch: int = 32
    teacher_lr: float = 1e-3
    cond_drop: float = 0.1

    # schedule
    T: int = 1000
    schedule_kind: str = "linear"
    shift: float = 3.0
    t_lo: int = 50
    t_hi: int = 950

    # distillation
    distill_steps: int = 1000
    batch_size: int = 8
    lr_student: float = 1e-3
    lr_lora: float = 2e-5
    student_rank: int = 4
    lora_rank: int = 4
    lora_scale: float = 1.0
    t_student: int | None = None
    gamma1_start: float = 1.0
    gamma1_end: float = 2.0
    gamma1_horizon: int | None = None
    phase_boundary: float = 0.6
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    checkpoint_every: int = 0

    weights: LossWeights = field(default_factory=LossWeights)
    dasm: DasmConfig = field(default_factory=DasmConfig)
    recipe: DegradationRecipe = field(default_factory=DegradationRecipe)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.t_lo < 1 or self.t_hi > self.T - 1 or self.t_lo > self.t_hi:
            raise ValueError(f"timestep bounds must satisfy 1 <= lo <= hi <= T-1, got [{self.t_lo}, {self.t_hi}]")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 0.0 <= self.phase_boundary <= 1.0:
            raise ValueError("phase_boundary is a fraction of distill_steps")

    @property
    def horizon(self) -> int:
        return self.gamma1_horizon or self.distill_steps

    @property
    def boundary_step(self) -> int:
        return int(round(self.phase_boundary * self.distill_steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["recipe"] = self.recipe.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"weights": LossWeights, "dasm": DasmConfig}
        kwargs = {}
        for k, v in d.items():
            if k in nested:
                kwargs[k] = v if isinstance(v, nested[k]) else nested[k](**v)
            elif k == "recipe":
                kwargs[k] = v if isinstance(v, DegradationRecipe) else DegradationRecipe.from_dict(v)
            elif k in cls.__dataclass_fields__:
                kwargs[k] = v
            else:
                raise KeyError(f"unknown config key {k!r}")
        return cls(**kwargs)

    def override(self, **updates) -> "TrainConfig":
        """Apply flat or dotted (``weights.lam``) overrides; ``None`` values are ignored."""
        d = self.to_dict()
        for key, value in updates.items():
            if value is None:
                continue
            head, _, tail = key.partition(".")
            if tail:
                d[head][tail] = value
            else:
                d[key] = value
        return TrainConfig.from_dict(d)


def load_config(path: str | Path | None = None, **overrides) -> TrainConfig:
    """Built-in defaults < YAML file < explicit overrides."""
    cfg = TrainConfig()
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **_merge_nested(cfg.to_dict(), data)})
    return cfg.override(**overrides)


def _merge_nested(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out

