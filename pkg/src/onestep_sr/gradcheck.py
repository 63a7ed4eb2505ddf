"""Independent oracles for every gradient the distillation loop produces.

Each check builds float64 micro-networks (under a thousand parameters each),
computes a quantity through the library code and compares it with something
derived without that code path: central finite differences, algebraic
identities, brute-force re-implementations. ``run_checks`` is what the
``gradcheck`` CLI subcommand and the acceptance suite call.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .dasm import DasmConfig, accumulate_tsd, rollout
from .losses import (PREDICTION_KINDS, LossWeights, inject_gradient, lora_diffusion_loss, reconstruction_loss,
                     tsd_gradient, tsm_gradient, vsd_gradient, weight_of_t)
from .nets.autoencoder import Decoder, Encoder
from .nets.lora import adapter_parameters, lora_wrap
from .nets.velocity import VelocityNet
from .scheduler import add_noise, euler_step, make_schedule, velocity_target

FD_STEP = 1e-4
TOLERANCES = {
    torch.float64: {"fd": 1e-4, "identity": 1e-6, "exact": 1e-6},
    torch.float32: {"fd": 1e-2, "identity": 1e-2, "exact": 1e-2},
}
# float32 rounding noise dominates below ~1e-2, so the step is widened there
FD_STEP_FOR = {torch.float64: FD_STEP, torch.float32: 3e-2}


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name:<22} err={self.error:.3e} tol={self.tol:.0e} ({self.seconds:.2f}s)"


# -- fixtures ---------------------------------------------------------------------

@dataclass
class MicroFixture:
    """Everything a score-gradient call needs, at toy size."""

    teacher: VelocityNet
    lora: nn.Module
    student: nn.Conv2d  # theta -> z_hat = student(x)
    x: torch.Tensor
    z: torch.Tensor
    eps: torch.Tensor
    cond: torch.Tensor
    t: int
    sched: object

    def z_hat(self) -> torch.Tensor:
        return self.student(self.x)


def micro_velocity_net(seed: int, dtype=torch.float64, channels: int = 2) -> VelocityNet:
    torch.manual_seed(seed)
    net = VelocityNet(channels=channels, width=4, n_blocks=1, emb_dim=4, num_classes=2, T=1000).to(dtype)
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def perturb_adapters(net: nn.Module, seed: int, scale: float = 0.3) -> None:
    """Give a fresh replica nonzero B matrices so it differs from its base."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in adapter_parameters(net).items():
            if name.endswith(".B"):
                p.copy_((torch.randn(p.shape, generator=gen, dtype=torch.float64) * scale).to(p.dtype))


def make_fixture(seed: int = 0, dtype=torch.float64, t: int | None = None, batch: int = 2) -> MicroFixture:
    gen = torch.Generator().manual_seed(10_000 + seed)
    teacher = micro_velocity_net(seed, dtype)
    lora = lora_wrap(teacher, rank=1, seed=seed)
    perturb_adapters(lora, seed)
    torch.manual_seed(20_000 + seed)
    student = nn.Conv2d(2, 2, 3, padding=1).to(dtype)

    def rnd(*shape):
        return torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)

    if t is None:
        t = int(torch.randint(50, 951, (), generator=gen))
    cond = torch.randint(0, 2, (batch,), generator=gen)
    return MicroFixture(teacher, lora, student, rnd(batch, 2, 4, 4), rnd(batch, 2, 4, 4), rnd(batch, 2, 4, 4),
                        cond, t, make_schedule(1000))


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- numerics -----------------------------------------------------------------------

def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """max |a - b| / max(|a|, |b|), with 0 when both vanish."""
    a, b = a.detach().double().flatten(), b.detach().double().flatten()
    scale = max(float(a.abs().max()), float(b.abs().max()))
    diff = float((a - b).abs().max())
    return 0.0 if scale == 0 else diff / scale


def central_differences(f: Callable[[], torch.Tensor], params: list[torch.Tensor], h: float) -> list[torch.Tensor]:
    """d f / d params by central differences, perturbing one entry at a time in place."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p, dtype=torch.float64)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = float(f())
                flat[i] = old - h
                down = float(f())
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def autograd_of(f: Callable[[], torch.Tensor], params: list[torch.Tensor]) -> list[torch.Tensor]:
    for p in params:
        p.grad = None
    f().backward()
    return [p.grad.detach().clone() for p in params]


def _max_rel(analytic: list[torch.Tensor], numeric: list[torch.Tensor]) -> float:
    return rel_error(torch.cat([a.flatten().double() for a in analytic]),
                     torch.cat([n.flatten().double() for n in numeric]))


def _weights(lam: float = 0.5, w_cfg: float = 7.5, **kw) -> LossWeights:
    return LossWeights(lam=lam, w_cfg=w_cfg, **kw)


# -- finite-difference checks -----------------------------------------------------

def _score_fd(residual_fn, seed: int, dtype) -> float:
    """Chain rule through the surrogate vs. two independent finite-difference oracles.

    Oracle 1 differentiates the linear surrogate ``sum(r * z_hat) / n``.
    Oracle 2 differentiates the target-regression form
    ``0.5 * |z_hat - stopgrad(z_hat0 - r)|^2 / n`` whose gradient at the
    fixture point is the residual with the network Jacobian omitted.
    """
    fx = make_fixture(seed, dtype)
    h = FD_STEP_FOR[dtype]
    with torch.no_grad():
        z0 = fx.z_hat()
    r = residual_fn(fx, z0)
    params = list(fx.student.parameters())
    n = z0.numel()
    analytic = autograd_of(lambda: inject_gradient(fx.z_hat(), r), params)
    linear = central_differences(lambda: (r * fx.z_hat()).sum() / n, params, h)
    target = (z0 - r).detach()
    quadratic = central_differences(lambda: 0.5 * (fx.z_hat() - target).pow(2).sum() / n, params, h)
    return max(_max_rel(analytic, linear), _max_rel(analytic, quadratic))


def check_vsd_fd(dtype=torch.float64, seed: int = 1) -> float:
    def residual(fx, z0):
        return vsd_gradient(z0, fx.teacher, fx.lora, fx.t, fx.eps, fx.cond, _weights(), fx.sched)
    return _score_fd(residual, seed, dtype)


def check_tsm_fd(dtype=torch.float64, seed: int = 2) -> float:
    def residual(fx, z0):
        return tsm_gradient(z0, fx.z, fx.teacher, fx.t, fx.eps, fx.cond, _weights(), fx.sched)
    return _score_fd(residual, seed, dtype)


def check_tsd_fd(dtype=torch.float64, seed: int = 3) -> float:
    def residual(fx, z0):
        return tsd_gradient(z0, fx.z, fx.teacher, fx.lora, fx.t, fx.eps, fx.cond, _weights(0.5), fx.sched)
    return _score_fd(residual, seed, dtype)


def check_reconstruction_fd(dtype=torch.float64, seed: int = 4) -> float:
    """Both phases; x_hat comes from a frozen micro decoder of the student latent."""
    fx = make_fixture(seed, dtype)
    h = FD_STEP_FOR[dtype]
    torch.manual_seed(30_000 + seed)
    decoder = Decoder(latent_channels=2, width=2, reduction=2).to(dtype)
    featnet = Encoder(latent_channels=2, width=2, reduction=2).to(dtype)
    for p in list(decoder.parameters()) + list(featnet.parameters()):
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(40_000 + seed)
    x_hq = torch.rand((fx.x.shape[0], 3, 8, 8), generator=gen, dtype=torch.float64).to(dtype)
    z_t = add_noise(fx.z, fx.eps, fx.t, fx.sched)
    params = list(fx.student.parameters())
    worst = 0.0
    for phase in ("early", "late"):
        weights = _weights(gamma1=1.5)

        def loss():
            z_hat = fx.z_hat()
            zh_t = add_noise(z_hat, fx.eps, fx.t, fx.sched)
            return reconstruction_loss(decoder(z_hat), x_hq, zh_t, z_t, weights, phase, featnet)[0]

        worst = max(worst, _max_rel(autograd_of(loss, params), central_differences(loss, params, h)))
    return worst


def check_lora_diffusion_fd(dtype=torch.float64, seed: int = 5) -> float:
    fx = make_fixture(seed, dtype)
    h = FD_STEP_FOR[dtype]
    with torch.no_grad():
        z_hat = fx.z_hat()
    params = list(adapter_parameters(fx.lora).values())

    def loss():
        return lora_diffusion_loss(fx.lora, z_hat, fx.t, fx.eps, fx.cond, fx.sched)

    return _max_rel(autograd_of(loss, params), central_differences(loss, params, h))


# -- algebraic and brute-force checks --------------------------------------------

BLEND_LAMBDAS = (0.0, 0.25, 0.5, 0.75, 1.0)


def check_tsd_identity(dtype=torch.float64, n_fixtures: int = 20) -> float:
    """tsd == (1 - lam) * tsm + lam * vsd for every lambda and fixture."""
    worst = 0.0
    for seed in range(n_fixtures):
        fx = make_fixture(100 + seed, dtype)
        with torch.no_grad():
            z_hat = fx.z_hat()
        for lam in BLEND_LAMBDAS:
            w = _weights(lam)
            tsd = tsd_gradient(z_hat, fx.z, fx.teacher, fx.lora, fx.t, fx.eps, fx.cond, w, fx.sched)
            tsm = tsm_gradient(z_hat, fx.z, fx.teacher, fx.t, fx.eps, fx.cond, w, fx.sched)
            vsd = vsd_gradient(z_hat, fx.teacher, fx.lora, fx.t, fx.eps, fx.cond, w, fx.sched)
            worst = max(worst, rel_error(tsd, (1 - lam) * tsm + lam * vsd))
    return worst


def check_zero_sentinels(dtype=torch.float64) -> float:
    """Largest magnitude among quantities that must vanish exactly."""
    fx = make_fixture(7, dtype)
    with torch.no_grad():
        z_hat = fx.z_hat()
    w = _weights()
    fresh = lora_wrap(fx.teacher, rank=1, seed=7)
    off = _weights(w_scale=0.0)
    must_vanish = [
        tsm_gradient(fx.z, fx.z, fx.teacher, fx.t, fx.eps, fx.cond, w, fx.sched),
        vsd_gradient(z_hat, fx.teacher, fresh, fx.t, fx.eps, fx.cond, w, fx.sched),
        vsd_gradient(z_hat, fx.teacher, fx.lora, fx.t, fx.eps, fx.cond, off, fx.sched),
        tsm_gradient(z_hat, fx.z, fx.teacher, fx.t, fx.eps, fx.cond, off, fx.sched),
        tsd_gradient(z_hat, fx.z, fx.teacher, fx.lora, fx.t, fx.eps, fx.cond, off, fx.sched),
    ]
    return max(float(g.abs().max()) for g in must_vanish)


def check_scheduler_roundtrip(dtype=torch.float64) -> float:
    """Euler with the exact velocity from t = T to 0 recovers z0; boundary sigmas exact."""
    worst = 0.0
    gen = torch.Generator().manual_seed(11)
    for kind in ("linear", "shifted"):
        sched = make_schedule(1000, kind)
        if sched.sigmas[0] != 0.0 or sched.sigmas[-1] != 1.0:
            return float("inf")
        z0 = torch.randn((2, 4, 8, 8), generator=gen, dtype=torch.float64).to(dtype)
        eps = torch.randn((2, 4, 8, 8), generator=gen, dtype=torch.float64).to(dtype)
        z = add_noise(z0, eps, sched.T, sched)
        v = velocity_target(z0, eps)
        for t in range(sched.T, 0, -1):
            z = euler_step(z, v, t, t - 1, sched)
        worst = max(worst, rel_error(z, z0))
    return worst


def _guided(net: nn.Module, z: torch.Tensor, t: int, cond: torch.Tensor, w_cfg: float) -> torch.Tensor:
    null = torch.full_like(cond, net.num_classes)
    uncond = net(z, t, null)
    return uncond + w_cfg * (net(z, t, cond) - uncond)


@torch.no_grad()
def brute_force_dasm(z_hat: torch.Tensor, z: torch.Tensor, eps: torch.Tensor, t: int, cfg: DasmConfig,
                     teacher, lora, cond, weights: LossWeights, sched) -> torch.Tensor:
    """Independent re-implementation: explicit sigma arithmetic and a plain node loop."""
    def pred(net, z, tt):
        v = _guided(net, z, tt, cond, weights.w_cfg)
        if weights.prediction == "velocity":
            return v
        # eps = z_t + (1 - sigma) * (eps - z0) on the straight path
        return z + (1 - float(sched.sigmas[tt])) * v

    def tsd(zh_t, z_t, tt):
        w = weight_of_t(tt, sched, weights)
        th, tq, lh = pred(teacher, zh_t, tt), pred(teacher, z_t, tt), pred(lora, zh_t, tt)
        return w * ((1 - weights.lam) * (th - tq) + weights.lam * (th - lh))

    s_t = float(sched.sigmas[t])
    zh, zq = (1 - s_t) * z_hat + s_t * eps, (1 - s_t) * z + s_t * eps
    total = tsd(zh, zq, t)
    for i in range(1, cfg.N + 1):
        cur, pre = t - i * cfg.s, t - (i - 1) * cfg.s
        if cur < cfg.t_floor:
            break
        d = float(sched.sigmas[cur] - sched.sigmas[pre])
        zh = zh + d * _guided(lora, zh, pre, cond, weights.w_cfg)
        zq = zq + d * _guided(teacher, zq, pre, cond, weights.w_cfg)
        weight = 1.0 / cfg.N if cfg.weight_kind == "uniform" else 0.5 ** i
        total = total + weight * tsd(zh, zq, cur)
    return total


DASM_CASES = ((1, 500), (2, 500), (4, 500), (4, 120), (2, 90))


def check_dasm_bruteforce(dtype=torch.float64) -> float:
    """accumulate_tsd vs. the brute-force loop, including floor-skipped nodes (t=120, t=90)."""
    worst = 0.0
    for prediction in PREDICTION_KINDS:
        weights = _weights(0.5, prediction=prediction)
        for k, (n, t) in enumerate(DASM_CASES):
            fx = make_fixture(200 + k, dtype, t=t)
            cfg = DasmConfig(N=n, s=50)
            with torch.no_grad():
                z_hat = fx.z_hat()
            zh_t = add_noise(z_hat, fx.eps, t, fx.sched)
            z_t = add_noise(fx.z, fx.eps, t, fx.sched)
            nodes = rollout(zh_t, z_t, t, cfg, fx.lora, fx.teacher, fx.cond, fx.sched, w_cfg=weights.w_cfg)
            got = accumulate_tsd((zh_t, z_t, t), nodes, fx.teacher, fx.lora, fx.cond, weights, fx.sched)
            want = brute_force_dasm(z_hat, fx.z, fx.eps, t, cfg, fx.teacher, fx.lora, fx.cond, weights, fx.sched)
            worst = max(worst, float((got - want).abs().max()))
    return worst


# -- registry ---------------------------------------------------------------------

CHECKS: dict[str, tuple[Callable, str]] = {
    "vsd_fd": (check_vsd_fd, "fd"),
    "tsm_fd": (check_tsm_fd, "fd"),
    "tsd_fd": (check_tsd_fd, "fd"),
    "reconstruction_fd": (check_reconstruction_fd, "fd"),
    "lora_diffusion_fd": (check_lora_diffusion_fd, "fd"),
    "tsd_identity": (check_tsd_identity, "identity"),
    "zero_sentinels": (check_zero_sentinels, "zero"),
    "scheduler_roundtrip": (check_scheduler_roundtrip, "exact"),
    "dasm_bruteforce": (check_dasm_bruteforce, "exact"),
}


def run_checks(only: list[str] | None = None, dtype=torch.float64) -> list[CheckResult]:
    names = list(CHECKS) if not only else only
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks: {', '.join(unknown)}")
    results = []
    for name in names:
        fn, kind = CHECKS[name]
        tol = 0.0 if kind == "zero" else TOLERANCES[dtype][kind]
        start = time.perf_counter()
        err = fn(dtype=dtype)
        results.append(CheckResult(name, err, tol, time.perf_counter() - start))
    return results
