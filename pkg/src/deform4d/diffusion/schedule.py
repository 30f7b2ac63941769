"""Noise schedules, forward diffusion and the DDIM update rule.

The denoisers predict the clean sample, so the DDIM step is written in
x0-prediction form: the implied noise is recovered from (x_t, x0_hat) and
re-applied at the previous noise level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..fields import DTYPE


class ScheduleError(Exception):
    pass


@dataclass
class DiffusionSchedule:
    betas: torch.Tensor
    alpha_bars: torch.Tensor

    def __post_init__(self):
        self.betas = torch.as_tensor(self.betas, dtype=DTYPE)
        self.alpha_bars = torch.as_tensor(self.alpha_bars, dtype=DTYPE)
        if self.betas.ndim != 1 or len(self.betas) < 2:
            raise ScheduleError("need at least 2 steps")
        if ((self.betas <= 0) | (self.betas >= 1)).any():
            raise ScheduleError("betas must lie in (0, 1)")
        recomputed = torch.cumprod(1.0 - self.betas, dim=0)
        if (recomputed - self.alpha_bars).abs().max() > 1e-9:
            raise ScheduleError("alpha_bars inconsistent with betas")
        if (self.alpha_bars[1:] >= self.alpha_bars[:-1]).any():
            raise ScheduleError("alpha_bars must be strictly decreasing")
        if self.alpha_bars[-1] <= 0 or self.alpha_bars[0] >= 1:
            raise ScheduleError("alpha_bars must stay inside (0, 1)")

    @property
    def n_steps(self):
        return len(self.betas)


def make_schedule(n_steps: int, kind: str = "linear") -> DiffusionSchedule:
    if n_steps < 2:
        raise ScheduleError("n_steps must be >= 2")
    if kind == "linear":
        betas = torch.linspace(1e-4, 2e-2, n_steps, dtype=DTYPE)
    elif kind == "cosine":
        s = 0.008
        ts = torch.arange(n_steps + 1, dtype=DTYPE) / n_steps
        f = torch.cos((ts + s) / (1 + s) * math.pi / 2) ** 2
        alpha_bars = f / f[0]
        betas = (1 - alpha_bars[1:] / alpha_bars[:-1]).clamp(1e-8, 0.999)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(betas, torch.cumprod(1.0 - betas, dim=0))


def _gather_alpha_bar(schedule, t):
    if isinstance(t, int):
        if not 0 <= t < schedule.n_steps:
            raise ScheduleError(f"step {t} outside [0, {schedule.n_steps})")
        return schedule.alpha_bars[t]
    t = torch.as_tensor(t)
    if (t < 0).any() or (t >= schedule.n_steps).any():
        raise ScheduleError("step outside schedule range")
    return schedule.alpha_bars[t]


def forward_noise(x0, t, eps, schedule: DiffusionSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; t may be int or (B,)."""
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    eps = torch.as_tensor(eps, dtype=DTYPE)
    ab = _gather_alpha_bar(schedule, t)
    while ab.dim() < x0.dim():
        ab = ab.unsqueeze(-1)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def timestep_embedding(t, dim: int):
    """Sinusoidal embedding: half sines, half cosines over geometric frequencies."""
    if dim % 2 != 0:
        raise ScheduleError("embedding dim must be even")
    t = torch.as_tensor(t, dtype=DTYPE)
    scalar = t.dim() == 0
    t = t.reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half
    )
    ang = t * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return emb[0] if scalar else emb


def ddim_timesteps(n_train_steps: int, n_sample_steps: int):
    """Descending timestep sequence for DDIM sampling."""
    if not 1 <= n_sample_steps <= n_train_steps:
        raise ScheduleError("n_sample_steps must lie in [1, n_train_steps]")
    ts = np.linspace(n_train_steps - 1, 0, n_sample_steps)
    return [int(round(t)) for t in ts]


def ddim_step(x_t, x0_hat, t: int, t_prev: int, schedule: DiffusionSchedule):
    """Deterministic DDIM update from level t to t_prev (t_prev = -1 means clean)."""
    ab_t = _gather_alpha_bar(schedule, t)
    eps_hat = (x_t - ab_t.sqrt() * x0_hat) / (1 - ab_t).sqrt()
    if t_prev < 0:
        return x0_hat
    ab_p = _gather_alpha_bar(schedule, t_prev)
    return ab_p.sqrt() * x0_hat + (1 - ab_p).sqrt() * eps_hat
