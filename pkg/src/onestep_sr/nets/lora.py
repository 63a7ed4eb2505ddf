"""Low-rank adapters for Linear and Conv2d layers.

``lora_wrap`` deep-copies a network, freezes every base parameter and
replaces each targeted layer with a wrapper whose output is
``base(x) + scale * B(A(x))``. ``B`` starts at zero, so a freshly wrapped
network computes exactly what its base does.
"""

from __future__ import annotations

import copy
import math

import torch
import torch.nn.functional as F
from torch import nn


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, scale: float, generator: torch.Generator):
        super().__init__()
        fan_in = base.in_features
        if rank > fan_in:
            raise ValueError(f"rank {rank} exceeds layer fan-in {fan_in}")
        self.base = base
        self.rank, self.scale = rank, scale
        bound = 1.0 / math.sqrt(fan_in)
        a = (torch.rand(rank, fan_in, generator=generator, dtype=torch.float64) * 2 - 1) * bound
        self.A = nn.Parameter(a.to(base.weight.dtype))
        self.B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * F.linear(F.linear(x, self.A), self.B)


class LoRAConv2d(nn.Module):
    def __init__(self, base: nn.Conv2d, rank: int, scale: float, generator: torch.Generator):
        super().__init__()
        if base.groups != 1:
            raise ValueError("grouped convolutions are not supported")
        k_h, k_w = base.kernel_size
        fan_in = base.in_channels * k_h * k_w
        if rank > fan_in:
            raise ValueError(f"rank {rank} exceeds layer fan-in {fan_in}")
        self.base = base
        self.rank, self.scale = rank, scale
        bound = 1.0 / math.sqrt(fan_in)
        a = (torch.rand(rank, fan_in, generator=generator, dtype=torch.float64) * 2 - 1) * bound
        self.A = nn.Parameter(a.to(base.weight.dtype))
        self.B = nn.Parameter(torch.zeros(base.out_channels, rank, dtype=base.weight.dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = self.base
        down = F.conv2d(x, self.A.view(self.rank, b.in_channels, *b.kernel_size),
                        stride=b.stride, padding=b.padding, dilation=b.dilation)
        up = F.conv2d(down, self.B[:, :, None, None])
        return b(x) + self.scale * up


ADAPTABLE = (nn.Linear, nn.Conv2d)


def lora_wrap(base: nn.Module, rank: int = 4, scale: float = 1.0, seed: int = 0) -> nn.Module:
    if rank < 1:
        raise ValueError("rank must be >= 1")
    net = copy.deepcopy(base)
    for p in net.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    targets = [name for name, m in net.named_modules() if isinstance(m, ADAPTABLE)]
    for name in targets:
        parent_name, _, child = name.rpartition(".")
        parent = net.get_submodule(parent_name) if parent_name else net
        layer = getattr(parent, child)
        wrapper = LoRAConv2d if isinstance(layer, nn.Conv2d) else LoRALinear
        setattr(parent, child, wrapper(layer, rank, scale, gen))
    net.lora_rank, net.lora_scale, net.lora_seed = rank, scale, seed
    return net


def lora_layers(net: nn.Module) -> dict[str, nn.Module]:
    """Attachment registry: module path -> adapter wrapper."""
    return {name: m for name, m in net.named_modules() if isinstance(m, (LoRALinear, LoRAConv2d))}


def adapter_parameters(net: nn.Module) -> dict[str, nn.Parameter]:
    return {f"{name}.{ab}": getattr(m, ab) for name, m in lora_layers(net).items() for ab in ("A", "B")}


def base_parameters(net: nn.Module) -> dict[str, nn.Parameter]:
    adapters = {id(p) for p in adapter_parameters(net).values()}
    return {n: p for n, p in net.named_parameters() if id(p) not in adapters}
