"""Noise schedules and the closed-form forward corruption of clean patches."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

COSINE_OFFSET = 0.008
ALPHA_BAR_FLOOR = 1e-6


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    alpha_bar: np.ndarray  # length steps + 1, alpha_bar[0] == 1
    kind: str = "cosine"

    def __post_init__(self):
        ab = self.alpha_bar
        if len(ab) != self.steps + 1 or ab[0] != 1.0:
            raise ValueError("alpha_bar must have length steps+1 and start at 1")
        if np.any(np.diff(ab) > 0) or ab.min() < 0 or ab.max() > 1:
            raise ValueError("alpha_bar must be nonincreasing inside [0, 1]")


def build_noise_schedule(steps: int, kind: str = "cosine") -> NoiseSchedule:
    if steps < 1:
        raise ValueError("diffusion step count must be >= 1")
    t = np.arange(steps + 1, dtype=np.float64)
    if kind == "cosine":
        s = COSINE_OFFSET
        f = np.cos(((t / steps + s) / (1 + s)) * math.pi / 2) ** 2
        ab = np.clip(f / math.cos((s / (1 + s)) * math.pi / 2) ** 2, ALPHA_BAR_FLOOR, 1.0)
        ab[0] = 1.0
        ab = np.minimum.accumulate(ab)
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, steps)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(steps, ab, kind)


def sample_timestep(rng: np.random.Generator, steps: int, size=None):
    """Uniform integer(s) on 1..steps."""
    return rng.integers(1, steps + 1, size=size)


def forward_diffuse(x, t, eps, schedule: NoiseSchedule):
    """``sqrt(abar_t) * x + sqrt(1 - abar_t) * eps``.

    Works on numpy arrays or torch tensors. ``t`` is an int or an integer
    array broadcastable against the leading dimensions of ``x`` (one step per
    patch row).
    """
    if tuple(np.shape(x)) != tuple(np.shape(eps)):
        raise ValueError(f"shape mismatch: x {np.shape(x)} vs eps {np.shape(eps)}")
    t_arr = np.asarray(t)
    if t_arr.min() < 0 or t_arr.max() > schedule.steps:
        raise ValueError(f"timestep outside [0, {schedule.steps}]")
    ab = schedule.alpha_bar[t_arr]
    a = np.sqrt(ab)
    b = np.sqrt(1.0 - ab)
    if t_arr.ndim:
        a = a[..., None]
        b = b[..., None]
    if isinstance(x, torch.Tensor):
        a = torch.as_tensor(a, dtype=x.dtype)
        b = torch.as_tensor(b, dtype=x.dtype)
        return a * x + b * torch.as_tensor(eps, dtype=x.dtype)
    return a * np.asarray(x, dtype=np.float64) + b * np.asarray(eps, dtype=np.float64)
