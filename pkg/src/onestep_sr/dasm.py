"""Distribution-aware sampling: roll noisy latents back along the sampler's own
trajectory and accumulate TSD residuals over the visited nodes."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .losses import LossWeights, tsd_at
from .nets.velocity import cfg_predict
from .scheduler import TimestepSchedule, euler_step

WEIGHT_KINDS = ("uniform", "decay")


@dataclass
class DasmConfig:
    N: int = 4
    s: int = 50
    weight_kind: str = "uniform"
    t_floor: int = 50

    def __post_init__(self):
        if self.N < 0:
            raise ValueError("N must be >= 0")
        if self.s < 1:
            raise ValueError("stride s must be >= 1")
        if self.t_floor < 0:
            raise ValueError("t_floor must be >= 0")
        if self.weight_kind not in WEIGHT_KINDS:
            raise ValueError(f"unknown weight kind {self.weight_kind!r}")

    def weight(self, i: int) -> float:
        return 1.0 / self.N if self.weight_kind == "uniform" else 0.5 ** i

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrajectorySample:
    z_hat_t: torch.Tensor  # student branch, stepped with the LoRA replica
    z_t: torch.Tensor  # HQ branch, stepped with the teacher
    t: int
    weight: float


@torch.no_grad()
def rollout(z_hat_t: torch.Tensor, z_t: torch.Tensor, t: int, cfg: DasmConfig, lora: nn.Module,
            teacher: nn.Module, cond: torch.Tensor, sched: TimestepSchedule,
            w_cfg: float = 7.5) -> list[TrajectorySample]:
    """Euler-step both branches from ``t`` down in strides of ``cfg.s``.

    Nodes whose timestep would fall below ``cfg.t_floor`` are dropped (and
    with them every later node), so no timestep is visited twice.
    """
    if cfg.s < 1:
        raise ValueError("stride s must be >= 1")
    if z_hat_t.shape != z_t.shape:
        raise ValueError("branch shapes differ")
    nodes: list[TrajectorySample] = []
    zh, z = z_hat_t.detach(), z_t.detach()
    for i in range(1, cfg.N + 1):
        cur = t - i * cfg.s
        pre = cur + cfg.s
        if cur < cfg.t_floor:
            break
        zh = euler_step(zh, cfg_predict(lora, zh, pre, cond, w_cfg=w_cfg), pre, cur, sched)
        z = euler_step(z, cfg_predict(teacher, z, pre, cond, w_cfg=w_cfg), pre, cur, sched)
        nodes.append(TrajectorySample(zh, z, cur, cfg.weight(i)))
    return nodes


def node_gradients(trajectory: list[TrajectorySample], teacher: nn.Module, lora: nn.Module,
                   cond: torch.Tensor, weights: LossWeights, sched: TimestepSchedule) -> list[torch.Tensor]:
    """Weighted TSD residual of every node (unsummed, for logging and checks)."""
    return [node.weight * tsd_at(node.z_hat_t, node.z_t, node.t, teacher, lora, cond, weights, sched)
            for node in trajectory]


def accumulate_tsd(base_pair: tuple[torch.Tensor, torch.Tensor, int], trajectory: list[TrajectorySample],
                   teacher: nn.Module, lora: nn.Module, cond: torch.Tensor, weights: LossWeights,
                   sched: TimestepSchedule, base_residual: torch.Tensor | None = None) -> torch.Tensor:
    """TSD residual at the base noisy pair plus the weighted node residuals.

    The result is a gradient with respect to the *clean* student latent: all
    trajectory nodes were built without gradient tracking, so every term
    reaches the student only through the base latent. ``base_residual`` lets a
    caller that already evaluated the base term skip recomputing it.
    """
    zh_t, z_t, t = base_pair
    for node in trajectory:
        if node.t >= t:
            raise ValueError(f"trajectory node at t={node.t} is not earlier than base t={t}")
        if node.z_hat_t.shape != zh_t.shape:
            raise ValueError("trajectory/base shape mismatch")
    if base_residual is None:
        base_residual = tsd_at(zh_t.detach(), z_t.detach(), t, teacher, lora, cond, weights, sched)
    total = base_residual
    for g in node_gradients(trajectory, teacher, lora, cond, weights, sched):
        total = total + g
    return total
