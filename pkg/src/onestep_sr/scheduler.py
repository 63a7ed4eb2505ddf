"""Flow-matching noise schedule and the handful of operations built on it.

Noising follows the straight path ``z_t = (1 - sigma_t) * z0 + sigma_t * eps``
and the regression target for the velocity network is ``eps - z0``, so an
Euler step with decreasing sigma moves samples toward data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

Timestep = Union[int, torch.Tensor]

DEFAULT_T = 1000
DEFAULT_SHIFT = 3.0
SCHEDULE_KINDS = ("linear", "shifted")


@dataclass(frozen=True)
class TimestepSchedule:
    T: int
    sigmas: np.ndarray  # float64, length T + 1
    kind: str = "linear"
    shift: float = DEFAULT_SHIFT

    def sigma(self, t: Timestep, like: torch.Tensor | None = None):
        """Look up sigma_t.

        For an integer ``t`` a python float is returned. For a tensor of
        per-sample timesteps the result is shaped ``(B, 1, 1, 1)`` so it
        broadcasts against a latent batch; ``like`` fixes dtype/device.
        """
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            _check_range(t.min().item(), self.T)
            _check_range(t.max().item(), self.T)
            table = torch.tensor(self.sigmas)
            s = table[t.long().cpu()]
            if like is not None:
                s = s.to(dtype=like.dtype, device=like.device)
            return s.view(-1, *([1] * (like.ndim - 1 if like is not None else 3)))
        t = int(t)
        _check_range(t, self.T)
        return float(self.sigmas[t])

    def alpha(self, t: int) -> float:
        return 1.0 - self.sigma(t)


def _check_range(t: int, T: int) -> None:
    if not 0 <= t <= T:
        raise ValueError(f"timestep {t} outside [0, {T}]")


def make_schedule(T: int = DEFAULT_T, kind: str = "linear", shift: float = DEFAULT_SHIFT) -> TimestepSchedule:
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}")
    u = np.arange(T + 1, dtype=np.float64) / T
    if kind == "linear":
        sigmas = u
    else:
        if not shift > 0:
            raise ValueError(f"shift must be positive, got {shift}")
        sigmas = shift * u / (1.0 + (shift - 1.0) * u)
    sigmas[0] = 0.0
    sigmas[T] = 1.0
    sigmas.setflags(write=False)
    return TimestepSchedule(T=T, sigmas=sigmas, kind=kind, shift=float(shift))


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t: Timestep, sched: TimestepSchedule) -> torch.Tensor:
    _same_shape(z0, eps)
    s = sched.sigma(t, like=z0)
    return (1 - s) * z0 + s * eps


def euler_step(z_t: torch.Tensor, v: torch.Tensor, t: int, t_prev: int, sched: TimestepSchedule) -> torch.Tensor:
    _same_shape(z_t, v)
    if t_prev >= t:
        raise ValueError(f"euler_step must go backwards in time (t_prev={t_prev}, t={t})")
    return z_t + (sched.sigma(t_prev) - sched.sigma(t)) * v


def velocity_target(z0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    _same_shape(z0, eps)
    return eps - z0


def sample_timestep(rng: torch.Generator, lo: int = 50, hi: int = 950, size: tuple[int, ...] = ()) -> Timestep:
    """Uniform integer timestep(s) in the closed range ``[lo, hi]``."""
    if not 0 <= lo <= hi:
        raise ValueError(f"invalid timestep range [{lo}, {hi}]")
    draw = torch.randint(lo, hi + 1, size, generator=rng)
    return int(draw) if size == () else draw
