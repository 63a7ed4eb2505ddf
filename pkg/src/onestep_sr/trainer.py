"""Autoencoder and teacher pretraining, then alternating student/replica distillation."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import TrainConfig
from .dasm import accumulate_tsd, rollout
from .degradation import PairedDataset
from .losses import (
    LossBreakdown,
    inject_gradient,
    lora_diffusion_loss,
    reconstruction_loss,
    rms,
    tsd_terms_at,
)
from .metrics import psnr_y
from .nets import (
    AutoEncoder,
    Student,
    VelocityNet,
    adapter_parameters,
    cfg_predict,
    images_to_tensor,
    lora_wrap,
    tensor_to_images,
)
from .scheduler import TimestepSchedule, add_noise, euler_step, make_schedule, sample_timestep, velocity_target

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "phase", "t", "gamma1") + LossBreakdown.COLUMNS


class NonFiniteLossError(FloatingPointError):
    """A loss went NaN/Inf; ``snapshot`` holds the offending step's diagnostics."""

    def __init__(self, step: int, snapshot: dict):
        super().__init__(f"non-finite loss at distillation step {step}: {snapshot}")
        self.step = step
        self.snapshot = snapshot


def schedule_from(config: TrainConfig) -> TimestepSchedule:
    return make_schedule(config.T, config.schedule_kind, config.shift)


def ramp_gamma1(step: int, horizon: int, start: float = 1.0, end: float = 2.0) -> float:
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    frac = min(max(step / horizon, 0.0), 1.0)
    return start + (end - start) * frac


def _global_norm(params) -> float:
    grads = [p.grad.detach().double().pow(2).sum() for p in params if p.grad is not None]
    return float(torch.stack(grads).sum().sqrt()) if grads else 0.0


def _adamw(params, lr: float, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=lr, betas=config.betas, eps=config.adam_eps,
                             weight_decay=config.weight_decay)


def _one_cycle(opt, lr: float, steps: int, warmup: float):
    # short runs need at least two warm-up steps or the annealing phases collapse
    return torch.optim.lr_scheduler.OneCycleLR(opt, lr, total_steps=steps, pct_start=max(warmup, 2.5 / steps))


# -- autoencoder ---------------------------------------------------------------

def train_autoencoder(config: TrainConfig, images: list[np.ndarray],
                      val_images: list[np.ndarray] | None = None) -> tuple[AutoEncoder, dict]:
    """Fit the latent codec with pixel MSE; returns the model and a summary dict.

    The summary records the held-out round-trip PSNR (the floor later checks
    compare against) and whether it cleared ``config.ae_psnr_threshold``.
    """
    if not images:
        raise ValueError("empty dataset")
    torch.manual_seed(config.seed)
    ae = AutoEncoder(config.latent_channels, config.ae_width, config.reduction)
    x = images_to_tensor(images)
    opt = _adamw(ae.parameters(), config.ae_lr, config)
    sched = _one_cycle(opt, config.ae_lr, config.ae_steps, 0.1)
    gen = torch.Generator().manual_seed(config.seed)
    for step in range(config.ae_steps):
        idx = torch.randint(0, len(x), (config.ae_batch,), generator=gen)
        loss = (ae(x[idx]) - x[idx]).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 250 == 0:
            log.info("ae step %d loss %.5f", step, loss.item())

    with torch.no_grad():
        z = torch.cat([ae.encoder(x[i:i + 128]) for i in range(0, len(x), 128)])
        ae.latent_scale.fill_(1.0 / float(z.std()))
    for p in ae.parameters():
        p.requires_grad_(False)
    held_out = val_images if val_images else images
    psnr = roundtrip_psnr(ae, held_out)
    converged = psnr >= config.ae_psnr_threshold
    if not converged:
        log.warning("autoencoder round-trip PSNR %.2f dB below threshold %.2f dB", psnr, config.ae_psnr_threshold)
    return ae, {"roundtrip_psnr_y": psnr, "converged": converged, "steps": config.ae_steps,
                "latent_scale": float(ae.latent_scale)}


@torch.no_grad()
def roundtrip_psnr(ae: AutoEncoder, images: list[np.ndarray]) -> float:
    x = images_to_tensor(images, next(ae.parameters()).dtype)
    recon = torch.cat([ae.decode(ae.encode(x[i:i + 128])) for i in range(0, len(x), 128)])
    return float(np.mean([psnr_y(a, b) for a, b in zip(tensor_to_images(recon), images)]))


@torch.no_grad()
def encode_images(ae: AutoEncoder, images: list[np.ndarray]) -> torch.Tensor:
    x = images_to_tensor(images, next(ae.parameters()).dtype)
    return torch.cat([ae.encode(x[i:i + 128]) for i in range(0, len(x), 128)])


# -- teacher -------------------------------------------------------------------

def train_teacher(config: TrainConfig, latents: torch.Tensor, labels, sched: TimestepSchedule | None = None
                  ) -> tuple[VelocityNet, dict]:
    """Conditional flow matching on autoencoder latents with label dropout for CFG."""
    sched = sched or schedule_from(config)
    torch.manual_seed(config.seed + 1)
    net = VelocityNet(config.latent_channels, config.teacher_width, config.teacher_blocks,
                      config.teacher_emb, config.num_classes, config.T)
    labels = torch.as_tensor(labels, dtype=torch.long)
    opt = _adamw(net.parameters(), config.teacher_lr, config)
    lr_sched = _one_cycle(opt, config.teacher_lr, config.teacher_steps, 0.05)
    gen = torch.Generator().manual_seed(config.seed + 1)
    for step in range(config.teacher_steps):
        idx = torch.randint(0, len(latents), (config.teacher_batch,), generator=gen)
        z0, cond = latents[idx], labels[idx].clone()
        drop = torch.rand(len(idx), generator=gen) < config.cond_drop
        cond[drop] = net.null_class
        t = sample_timestep(gen, 1, config.T, size=(len(idx),))
        eps = torch.randn(z0.shape, generator=gen)
        loss = (net(add_noise(z0, eps, t, sched), t, cond) - velocity_target(z0, eps)).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        lr_sched.step()
        if step % 500 == 0:
            log.info("teacher step %d loss %.4f", step, loss.item())
    for p in net.parameters():
        p.requires_grad_(False)
    return net, {"steps": config.teacher_steps}


@torch.no_grad()
def validation_velocity_loss(net: VelocityNet, latents: torch.Tensor, labels, sched: TimestepSchedule,
                             seed: int = 0) -> float:
    gen = torch.Generator().manual_seed(seed)
    labels = torch.as_tensor(labels, dtype=torch.long)
    t = sample_timestep(gen, 1, sched.T, size=(len(latents),))
    eps = torch.randn(latents.shape, generator=gen)
    pred = net(add_noise(latents, eps, t, sched), t, labels)
    return float((pred - velocity_target(latents, eps)).pow(2).mean())


@torch.no_grad()
def sample_latents(net: VelocityNet, cond: torch.Tensor, shape: tuple[int, ...], sched: TimestepSchedule,
                   steps: int = 20, w_cfg: float = 1.0, seed: int = 0) -> torch.Tensor:
    """Euler sampling from pure noise at t = T down to 0."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn((len(cond), *shape), generator=gen)
    grid = np.linspace(sched.T, 0, steps + 1).round().astype(int)
    for t, t_prev in zip(grid[:-1], grid[1:]):
        z = euler_step(z, cfg_predict(net, z, int(t), cond, w_cfg=w_cfg), int(t), int(t_prev), sched)
    return z


# -- distillation ----------------------------------------------------------------

@dataclass
class TrainState:
    student: Student
    lora: nn.Module
    opt_student: torch.optim.Optimizer
    opt_lora: torch.optim.Optimizer
    gen: torch.Generator
    step: int = 0
    history: list[dict] = field(default_factory=list)
    student_updates: int = 0
    lora_updates: int = 0


def init_state(config: TrainConfig, ae: AutoEncoder, teacher: VelocityNet) -> TrainState:
    student = Student(ae, teacher, rank=config.student_rank, scale=config.lora_scale, seed=config.seed + 2,
                      t_student=config.t_student, upscale=config.recipe.downscale_factor)
    lora = lora_wrap(teacher, config.lora_rank, config.lora_scale, seed=config.seed + 4)
    opt_s = _adamw(list(student.trainable_parameters().values()), config.lr_student, config)
    opt_l = _adamw(list(adapter_parameters(lora).values()), config.lr_lora, config)
    gen = torch.Generator().manual_seed(config.seed + 5)
    return TrainState(student, lora, opt_s, opt_l, gen)


def phase_of(step: int, config: TrainConfig) -> str:
    return "early" if step < config.boundary_step else "late"


def distill_step(state: TrainState, batch, teacher: VelocityNet, ae: AutoEncoder, config: TrainConfig,
                 sched: TimestepSchedule | None = None, update_lora: bool = True) -> tuple[TrainState, LossBreakdown]:
    """One student update (reconstruction + gamma2 * TSD) then one replica update."""
    sched = sched or schedule_from(config)
    x_l, x_h, labels = batch
    student, lora, gen = state.student, state.lora, state.gen
    phase = phase_of(state.step, config)
    weights = dataclasses.replace(
        config.weights, gamma1=ramp_gamma1(state.step, config.horizon, config.gamma1_start, config.gamma1_end))
    out = LossBreakdown()

    z_hat, x_hat = student(x_l)
    with torch.no_grad():
        z = ae.encode(x_h)

    t = sample_timestep(gen, config.t_lo, config.t_hi)
    eps = torch.randn(z.shape, generator=gen)
    zh_t, z_t = add_noise(z_hat, eps, t, sched), add_noise(z, eps, t, sched)

    loss, parts = reconstruction_loss(x_hat, x_h, zh_t, z_t, weights, phase, ae.encoder)
    out.recon_perceptual, out.recon_latent_mse = parts["recon_perceptual"], parts["recon_latent_mse"]

    if weights.gamma2 > 0:
        base = (zh_t.detach(), z_t, t)
        terms = tsd_terms_at(*base, teacher, lora, labels, weights, sched)
        trajectory = []
        if phase == "late" and config.dasm.N > 0:
            trajectory = rollout(zh_t.detach(), z_t, t, config.dasm, lora, teacher, labels, sched, weights.w_cfg)
        reg = accumulate_tsd(base, trajectory, teacher, lora, labels, weights, sched, base_residual=terms["tsd"])
        loss = loss + weights.gamma2 * inject_gradient(z_hat, reg)
        out.tsd, out.tsm_component, out.vsd_component = rms(reg), rms(terms["tsm"]), rms(terms["vsd"])
        out.grad_norms["reg"] = weights.gamma2 * float(reg.double().norm())

    if not math.isfinite(float(loss.detach())) or not out.is_finite():
        raise NonFiniteLossError(state.step, {"t": t, "phase": phase, **out.row()})

    params = list(student.trainable_parameters().values())
    state.opt_student.zero_grad()
    loss.backward()
    out.grad_norms["student"] = _global_norm(params)
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
    state.opt_student.step()
    state.student_updates += 1

    # replica update on fresh (t, eps); student latent carries no graph here
    z_det = z_hat.detach()
    t2 = sample_timestep(gen, config.t_lo, config.t_hi)
    eps2 = torch.randn(z_det.shape, generator=gen)
    lora_params = list(adapter_parameters(lora).values())
    diff = lora_diffusion_loss(lora, z_det, t2, eps2, labels, sched)
    if not math.isfinite(float(diff.detach())):
        raise NonFiniteLossError(state.step, {"t": t2, "lora_diffusion": float(diff.detach())})
    out.lora_diffusion = float(diff.detach())
    if update_lora:
        state.opt_lora.zero_grad()
        diff.backward()
        out.grad_norms["lora"] = _global_norm(lora_params)
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(lora_params, config.grad_clip)
        state.opt_lora.step()
        state.lora_updates += 1

    state.history.append({"step": state.step, "phase": phase, "t": t, "gamma1": weights.gamma1, **out.row()})
    state.step += 1
    return state, out


def batch_tensors(data: PairedDataset, idx) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    idx = [int(i) for i in idx]
    return (images_to_tensor([data.lq[i] for i in idx]), images_to_tensor([data.hq[i] for i in idx]),
            torch.tensor([data.labels[i] for i in idx], dtype=torch.long))


def distill(config: TrainConfig, train: PairedDataset, teacher: VelocityNet, ae: AutoEncoder,
            out_dir: str | Path | None = None, steps: int | None = None) -> TrainState:
    """Run ``config.distill_steps`` alternating updates; writes log/checkpoints if ``out_dir``."""
    from .nets.checkpoint import save_student

    sched = schedule_from(config)
    torch.manual_seed(config.seed + 3)
    state = init_state(config, ae, teacher)
    lq, hq = images_to_tensor(train.lq), images_to_tensor(train.hq)
    labels = torch.tensor(train.labels, dtype=torch.long)
    data_gen = torch.Generator().manual_seed(config.seed + 6)
    total = config.distill_steps if steps is None else steps
    for _ in range(total):
        idx = torch.randint(0, len(hq), (config.batch_size,), generator=data_gen)
        state, parts = distill_step(state, (lq[idx], hq[idx], labels[idx]), teacher, ae, config, sched)
        if state.step % 50 == 0 or state.step == 1:
            log.info("distill step %d %s", state.step, {k: round(v, 5) for k, v in parts.row().items()})
        if out_dir and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_student(Path(out_dir) / f"step_{state.step:06d}", state.student, state.lora, step=state.step)
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_log(state.history, out_dir / "train_log.csv")
    return state


def write_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
