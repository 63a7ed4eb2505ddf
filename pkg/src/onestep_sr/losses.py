"""Distillation losses.

Score-distillation terms (VSD, TSM, TSD) are returned as *gradients with
respect to the student latent* ``z_hat``. They reach the student parameters
through :func:`inject_gradient`, whose surrogate ``<stopgrad(g), z_hat>``
supplies exactly the ``dz_hat/dtheta`` factor and nothing else: no teacher or
replica network is differentiated.

The networks predict flow-matching velocities. By default the residuals are
taken between the implied noise predictions ``z_t + (1 - sigma) * v``, which
is what the score-distillation algebra is written for; ``prediction =
"velocity"`` uses the raw velocities instead.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .nets.autoencoder import Encoder
from .nets.velocity import cfg_predict
from .scheduler import TimestepSchedule, add_noise, velocity_target

WEIGHTING_KINDS = ("constant", "sigma_sq", "snr")
PREDICTION_KINDS = ("noise", "velocity")


@dataclass
class LossWeights:
    lam: float = 0.5
    gamma1: float = 1.0
    gamma2: float = 1.0
    w_of_t: str = "constant"
    w_scale: float = 1.0
    w_cfg: float = 7.5
    prediction: str = "noise"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("gamma weights must be non-negative")
        if self.w_of_t not in WEIGHTING_KINDS:
            raise ValueError(f"unknown weighting kind {self.w_of_t!r}")
        if self.prediction not in PREDICTION_KINDS:
            raise ValueError(f"unknown prediction kind {self.prediction!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def weight_of_t(t: int, sched: TimestepSchedule, weights: LossWeights) -> float:
    if weights.w_of_t == "constant":
        w = 1.0
    elif weights.w_of_t == "sigma_sq":
        w = sched.sigma(t) ** 2
    else:
        # alpha^2 / sigma^2, capped so the low-noise end stays bounded
        s = sched.sigma(t)
        w = 5.0 if s == 0 else min((1 - s) ** 2 / s ** 2, 5.0)
    return weights.w_scale * w


@dataclass
class LossBreakdown:
    recon_perceptual: float = 0.0
    recon_latent_mse: float = 0.0
    tsd: float = 0.0
    tsm_component: float = 0.0
    vsd_component: float = 0.0
    lora_diffusion: float = 0.0
    grad_norms: dict = field(default_factory=dict)

    COLUMNS = ("recon_perceptual", "recon_latent_mse", "tsd", "tsm_component", "vsd_component",
               "lora_diffusion", "grad_norm_student", "grad_norm_lora", "grad_norm_reg")

    def row(self) -> dict:
        r = {k: getattr(self, k) for k in self.COLUMNS[:6]}
        for k in ("student", "lora", "reg"):
            r[f"grad_norm_{k}"] = self.grad_norms.get(k, 0.0)
        return r

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.row().values())


def _check(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def rms(x: torch.Tensor) -> float:
    return float(x.detach().double().pow(2).mean().sqrt())


# -- score residuals at given noisy latents -------------------------------------

def noise_from_velocity(z_t: torch.Tensor, v: torch.Tensor, sigma: float) -> torch.Tensor:
    """Noise prediction implied by a velocity prediction on the straight path."""
    return z_t + (1.0 - sigma) * v


@torch.no_grad()
def score_terms_at(zh_t: torch.Tensor, z_t: torch.Tensor, t: int, teacher: nn.Module, lora: nn.Module | None,
                   cond: torch.Tensor, weights: LossWeights, sched: TimestepSchedule) -> dict[str, torch.Tensor]:
    """Guided predictions entering the score residuals, each evaluated once."""
    inputs = {"teacher_hat": (teacher, zh_t), "teacher_hq": (teacher, z_t), "lora_hat": (lora, zh_t)}
    sigma = sched.sigma(t)
    out = {}
    for key, (net, z) in inputs.items():
        if net is None or z is None:
            continue
        v = cfg_predict(net, z, t, cond, w_cfg=weights.w_cfg)
        out[key] = noise_from_velocity(z, v, sigma) if weights.prediction == "noise" else v
    return out


def tsd_terms_at(zh_t: torch.Tensor, z_t: torch.Tensor, t: int, teacher: nn.Module, lora: nn.Module,
                 cond: torch.Tensor, weights: LossWeights, sched: TimestepSchedule) -> dict[str, torch.Tensor]:
    """TSD residual for already-noised latents, with its TSM and VSD parts."""
    _check(zh_t, z_t)
    w = weight_of_t(t, sched, weights)
    p = score_terms_at(zh_t, z_t, t, teacher, lora, cond, weights, sched)
    return {
        "tsd": w * (p["teacher_hat"] - p["teacher_hq"] + weights.lam * (p["teacher_hq"] - p["lora_hat"])),
        "tsm": w * (p["teacher_hat"] - p["teacher_hq"]),
        "vsd": w * (p["teacher_hat"] - p["lora_hat"]),
    }


def tsd_at(zh_t: torch.Tensor, z_t: torch.Tensor, t: int, teacher: nn.Module, lora: nn.Module,
           cond: torch.Tensor, weights: LossWeights, sched: TimestepSchedule) -> torch.Tensor:
    return tsd_terms_at(zh_t, z_t, t, teacher, lora, cond, weights, sched)["tsd"]


# -- public gradients -------------------------------------------------------------

def vsd_gradient(z_hat: torch.Tensor, teacher: nn.Module, lora: nn.Module, t: int, eps: torch.Tensor,
                 cond: torch.Tensor, weights: LossWeights, sched: TimestepSchedule) -> torch.Tensor:
    _check(z_hat, eps)
    zh_t = add_noise(z_hat.detach(), eps, t, sched)
    w = weight_of_t(t, sched, weights)
    p = score_terms_at(zh_t, None, t, teacher, lora, cond, weights, sched)
    return w * (p["teacher_hat"] - p["lora_hat"])


def tsm_gradient(z_hat: torch.Tensor, z: torch.Tensor, teacher: nn.Module, t: int, eps: torch.Tensor,
                 cond: torch.Tensor, weights: LossWeights, sched: TimestepSchedule) -> torch.Tensor:
    """Teacher residual between synthetic and HQ latents noised with the *same* eps.

    The teacher Jacobian is omitted: the residual itself is the gradient.
    """
    _check(z_hat, z)
    _check(z_hat, eps)
    zh_t = add_noise(z_hat.detach(), eps, t, sched)
    z_t = add_noise(z.detach(), eps, t, sched)
    w = weight_of_t(t, sched, weights)
    p = score_terms_at(zh_t, z_t, t, teacher, None, cond, weights, sched)
    return w * (p["teacher_hat"] - p["teacher_hq"])


def tsd_gradient(z_hat: torch.Tensor, z: torch.Tensor, teacher: nn.Module, lora: nn.Module, t: int,
                 eps: torch.Tensor, cond: torch.Tensor, weights: LossWeights,
                 sched: TimestepSchedule) -> torch.Tensor:
    _check(z_hat, z)
    _check(z_hat, eps)
    zh_t = add_noise(z_hat.detach(), eps, t, sched)
    z_t = add_noise(z.detach(), eps, t, sched)
    return tsd_at(zh_t, z_t, t, teacher, lora, cond, weights, sched)


def inject_gradient(z_hat: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Scalar surrogate whose gradient w.r.t. ``z_hat`` is ``grad / z_hat.numel()``.

    The mean normalisation puts score terms on the same footing as the
    mean-reduced reconstruction losses.
    """
    _check(z_hat, grad)
    return (grad.detach() * z_hat).sum() / z_hat.numel()


# -- reconstruction ---------------------------------------------------------------

def perceptual_distance(a: torch.Tensor, b: torch.Tensor, featnet: Encoder, depth: int = 3,
                        reduce: bool = True) -> torch.Tensor:
    """Distance between channel-normalised activations of a frozen encoder.

    Per layer: unit-normalise features along channels at each location,
    take the mean squared difference; layers are averaged. ``reduce=False``
    returns one value per batch element.
    """
    _check(a, b)
    fa, fb = featnet.features(a, depth), featnet.features(b, depth)
    total = 0.0
    for x, y in zip(fa, fb):
        x = x / (x.pow(2).sum(1, keepdim=True) + 1e-10).sqrt()
        y = y / (y.pow(2).sum(1, keepdim=True) + 1e-10).sqrt()
        total = total + (x - y).pow(2).sum(1).mean((1, 2))
    total = total / len(fa)
    return total.mean() if reduce else total


def latent_mse(z_t: torch.Tensor, zh_t: torch.Tensor) -> torch.Tensor:
    _check(z_t, zh_t)
    return (z_t - zh_t).pow(2).mean()


def reconstruction_loss(x_hat: torch.Tensor, x_hq: torch.Tensor, zh_t: torch.Tensor, z_t: torch.Tensor,
                        weights: LossWeights, phase: str, featnet: Encoder) -> tuple[torch.Tensor, dict]:
    """gamma1 * perceptual + latent MSE (the MSE term is dropped in the late phase)."""
    if phase not in ("early", "late"):
        raise ValueError(f"phase must be 'early' or 'late', got {phase!r}")
    _check(x_hat, x_hq)
    perc = perceptual_distance(x_hat, x_hq, featnet)
    mse = latent_mse(z_t, zh_t) if phase == "early" else torch.zeros((), dtype=x_hat.dtype)
    return weights.gamma1 * perc + mse, {"recon_perceptual": float(perc.detach()), "recon_latent_mse": float(mse.detach())}


# -- LoRA replica -----------------------------------------------------------------

def lora_diffusion_loss(lora: nn.Module, z_hat_detached: torch.Tensor, t, eps: torch.Tensor,
                        cond: torch.Tensor, sched: TimestepSchedule) -> torch.Tensor:
    """Flow-matching loss of the replica on (stop-gradient) student latents."""
    if z_hat_detached.requires_grad:
        raise ValueError("z_hat must be detached from the student graph")
    zh_t = add_noise(z_hat_detached, eps, t, sched)
    target = velocity_target(z_hat_detached, eps)
    return (lora(zh_t, t, cond) - target).pow(2).mean()
