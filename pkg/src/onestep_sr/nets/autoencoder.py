"""Tiny convolutional autoencoder used as the latent codec."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """List of (H, W, 3) arrays (or one array) -> (B, 3, H, W) tensor."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    arr = np.stack([np.asarray(im) for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def tensor_to_images(x: torch.Tensor) -> list[np.ndarray]:
    arr = x.detach().cpu().double().numpy().transpose(0, 2, 3, 1)
    return [np.clip(a, 0.0, 1.0) for a in arr]


def _n_halvings(reduction: int) -> int:
    n = int(round(math.log2(reduction)))
    if reduction < 2 or 2 ** n != reduction:
        raise ValueError("reduction must be a power of two >= 2")
    return n


class Encoder(nn.Module):
    """Space-to-depth by ``reduction / 2``, then one strided conv stage."""

    def __init__(self, latent_channels: int = 4, width: int = 32, reduction: int = 4):
        super().__init__()
        pre = 2 ** (_n_halvings(reduction) - 1)
        self.unshuffle = nn.PixelUnshuffle(pre) if pre > 1 else nn.Identity()
        self.conv_in = nn.Conv2d(3 * pre * pre, width, 3, padding=1)
        self.body = nn.ModuleList([
            nn.Conv2d(width, width, 3, padding=1),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
        ])
        self.conv_out = nn.Conv2d(2 * width, latent_channels, 3, padding=1)
        self.act = nn.SiLU()

    def features(self, x: torch.Tensor, depth: int | None = None) -> list[torch.Tensor]:
        """Intermediate activations, shallowest first (the perceptual feature stack)."""
        h = self.act(self.conv_in(self.unshuffle(x * 2 - 1)))
        feats = [h]
        for layer in self.body[: None if depth is None else max(depth - 1, 0)]:
            h = self.act(layer(h))
            feats.append(h)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv_out(self.features(x)[-1])


class Decoder(nn.Module):
    def __init__(self, latent_channels: int = 4, width: int = 32, reduction: int = 4):
        super().__init__()
        post = 2 ** (_n_halvings(reduction) - 1)
        self.conv_in = nn.Conv2d(latent_channels, 2 * width, 3, padding=1)
        self.mid = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        self.up = nn.Conv2d(2 * width, 4 * width, 3, padding=1)
        self.refine = nn.Conv2d(width, width, 3, padding=1)
        self.conv_out = nn.Conv2d(width, 3 * post * post, 3, padding=1)
        self.shuffle = nn.PixelShuffle(2)
        self.to_rgb = nn.PixelShuffle(post) if post > 1 else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.act(self.conv_in(z))
        h = self.act(self.mid(h))
        h = self.act(self.shuffle(self.up(h)))
        h = self.act(self.refine(h))
        return (self.to_rgb(self.conv_out(h)) + 1) / 2


class AutoEncoder(nn.Module):
    """Image <-> latent codec with spatial reduction ``reduction``.

    ``latent_scale`` rescales raw encoder output to roughly unit variance so
    that latents and flow-matching noise live on the same scale. It is fitted
    once after training and stored in the checkpoint manifest.
    """

    def __init__(self, latent_channels: int = 4, width: int = 32, reduction: int = 4):
        super().__init__()
        self.latent_channels = latent_channels
        self.width = width
        self.reduction = reduction
        self.encoder = Encoder(latent_channels, width, reduction)
        self.decoder = Decoder(latent_channels, width, reduction)
        self.register_buffer("latent_scale", torch.ones(()))

    def config(self) -> dict:
        return {"latent_channels": self.latent_channels, "width": self.width, "reduction": self.reduction}

    def _check(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
        if x.shape[-1] % self.reduction or x.shape[-2] % self.reduction:
            raise ValueError(f"image size {tuple(x.shape[-2:])} not divisible by {self.reduction}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.encoder(x) * self.latent_scale

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ValueError(f"expected (B, {self.latent_channels}, h, w) latents, got {tuple(z.shape)}")
        return self.decoder(z / self.latent_scale)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(0.0, 1.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(self.encode(x))
