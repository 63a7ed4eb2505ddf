"""Velocity-prediction network shared by the teacher, its LoRA replica and the student denoiser."""

from __future__ import annotations

import math

import torch
from torch import nn


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _groups(width: int) -> int:
    return math.gcd(8, width)


class ResBlock(nn.Module):
    def __init__(self, width: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(width), width)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * width)
        self.norm2 = nn.GroupNorm(_groups(width), width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        x = self.conv1(self.act(self.norm1(h)))
        scale, shift = self.emb(emb)[:, :, None, None].chunk(2, dim=1)
        x = self.norm2(x) * (1 + scale) + shift
        x = self.conv2(self.act(x))
        return h + x


class VelocityNet(nn.Module):
    """Maps ``(z_t, t, class_id)`` to a velocity with the same shape as ``z_t``.

    Class ids run over ``0..num_classes-1``; ``num_classes`` itself is the null
    (unconditional) entry of the embedding table.
    """

    def __init__(self, channels: int = 4, width: int = 48, n_blocks: int = 2, emb_dim: int = 64,
                 num_classes: int = 4, T: int = 1000):
        super().__init__()
        self.channels, self.width, self.n_blocks = channels, width, n_blocks
        self.emb_dim, self.num_classes, self.T = emb_dim, num_classes, T
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.class_emb = nn.Embedding(num_classes + 1, emb_dim)
        self.conv_in = nn.Conv2d(channels, width, 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(width, emb_dim) for _ in range(n_blocks))
        self.norm_out = nn.GroupNorm(_groups(width), width)
        self.conv_out = nn.Conv2d(width, channels, 3, padding=1)
        self.act = nn.SiLU()

    @property
    def null_class(self) -> int:
        return self.num_classes

    def config(self) -> dict:
        return {"channels": self.channels, "width": self.width, "n_blocks": self.n_blocks,
                "emb_dim": self.emb_dim, "num_classes": self.num_classes, "T": self.T}

    def null_cond(self, batch: int, device=None) -> torch.Tensor:
        return torch.full((batch,), self.null_class, dtype=torch.long, device=device)

    def forward(self, z_t: torch.Tensor, t, cond: torch.Tensor | None = None) -> torch.Tensor:
        b = z_t.shape[0]
        if not isinstance(t, torch.Tensor) or t.ndim == 0:
            t = torch.full((b,), int(t), dtype=torch.long)
        if cond is None:
            cond = self.null_cond(b, z_t.device)
        # timesteps rescaled to [0, 1000] so the embedding is T-agnostic
        temb = timestep_embedding(t.to(z_t.device) * (1000.0 / self.T), self.emb_dim).to(z_t.dtype)
        emb = self.act(self.time_mlp(temb) + self.class_emb(cond))
        h = self.conv_in(z_t)
        for block in self.blocks:
            h = block(h, emb)
        return self.conv_out(self.act(self.norm_out(h)))


def cfg_predict(net: nn.Module, z_t: torch.Tensor, t, cond: torch.Tensor,
                null_cond: torch.Tensor | None = None, w_cfg: float = 7.5) -> torch.Tensor:
    """Classifier-free guided velocity ``null + w * (cond - null)``."""
    if w_cfg == 1.0:
        return net(z_t, t, cond)
    if null_cond is None:
        null_cond = torch.full_like(cond, net.null_class)
    uncond = net(z_t, t, null_cond)
    if w_cfg == 0.0:
        return uncond
    return uncond + w_cfg * (net(z_t, t, cond) - uncond)
