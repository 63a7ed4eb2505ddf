"""One-step student: LoRA encoder -> single residual denoiser call -> frozen decoder."""

from __future__ import annotations

import copy

import torch
import torch.nn.functional as F
from torch import nn

from .autoencoder import AutoEncoder
from .lora import adapter_parameters, lora_wrap
from .velocity import VelocityNet


class Student(nn.Module):
    """Maps a low-resolution image batch to ``(z_hat, x_hat)`` with one denoiser call.

    The denoiser output is added to the encoded latent through a scalar gate
    that starts at zero, so a fresh student reproduces
    ``decode(encode(upsample(x_L)))`` exactly.
    """

    def __init__(self, ae: AutoEncoder, teacher: VelocityNet, rank: int = 4, scale: float = 1.0,
                 seed: int = 0, t_student: int | None = None, upscale: int = 4):
        super().__init__()
        self.encoder = lora_wrap(ae.encoder, rank, scale, seed)
        self.denoiser = lora_wrap(teacher, rank, scale, seed + 1)
        self.decoder = copy.deepcopy(ae.decoder)
        for p in self.decoder.parameters():
            p.requires_grad_(False)
        self.register_buffer("latent_scale", ae.latent_scale.detach().clone())
        self.gate = nn.Parameter(torch.zeros((), dtype=ae.latent_scale.dtype))
        self.t_student = teacher.T if t_student is None else int(t_student)
        self.upscale = upscale
        self.rank, self.scale, self.seed = rank, scale, seed
        self.denoiser_evals = 0

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        params = {f"encoder.{k}": v for k, v in adapter_parameters(self.encoder).items()}
        params.update({f"denoiser.{k}": v for k, v in adapter_parameters(self.denoiser).items()})
        params["gate"] = self.gate
        return params

    def upsample(self, x_l: torch.Tensor) -> torch.Tensor:
        return F.interpolate(x_l, scale_factor=self.upscale, mode="bilinear", align_corners=False)

    def encode(self, x_l: torch.Tensor) -> torch.Tensor:
        if x_l.ndim != 4 or x_l.shape[1] != 3:
            raise ValueError(f"expected (B, 3, h, w) images, got {tuple(x_l.shape)}")
        return self.encoder(self.upsample(x_l) if self.upscale != 1 else x_l) * self.latent_scale

    def forward(self, x_l: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns the latent and the *unclamped* decoded image (training path)."""
        z_in = self.encode(x_l)
        t = torch.full((z_in.shape[0],), self.t_student, dtype=torch.long)
        correction = self.denoiser(z_in, t, self.denoiser.null_cond(z_in.shape[0], z_in.device))
        self.denoiser_evals += z_in.shape[0]
        z_hat = z_in + self.gate * correction
        return z_hat, self.decoder(z_hat / self.latent_scale)

    @torch.no_grad()
    def predict(self, x_l: torch.Tensor) -> torch.Tensor:
        return self(x_l)[1].clamp(0.0, 1.0)
