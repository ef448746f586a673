"""Variance-preserving noise schedules and the forward corruption process.

A schedule holds per-step signal/noise coefficients (alpha, sigma) with
alpha[t]^2 + sigma[t]^2 = 1 at every index, plus per-step loss weights w.
Index t=0 is the clean boundary (alpha=1, sigma=0); t=T is maximum noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, RangeError, ShapeError

SCHEDULE_FAMILIES = ("cosine", "linear")

# Offset in the squared-cosine profile (smooths the t=0 end).
_COSINE_OFFSET = 0.008
# Floor on alpha^2 keeping the forward map invertible at t=T.
_COSINE_ALPHA_SQ_MIN = 1e-4
# Terminal alpha of the linear family; bounds sigma/alpha for stable training.
_LINEAR_ALPHA_MIN = 0.05


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable diffusion control parameters over T discrete steps."""

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    w: np.ndarray
    family: str = "custom"

    def __post_init__(self):
        for name in ("alpha", "sigma", "w"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if len(self.alpha) != self.T + 1 or len(self.sigma) != self.T + 1 or len(self.w) != self.T + 1:
            raise ConfigError("alpha, sigma, w must each have T+1 entries")


def build_schedule(T: int, family: str = "cosine") -> NoiseSchedule:
    """Build a variance-preserving schedule of the given family.

    cosine: squared-cosine signal profile with a small offset.
    linear: alpha decreasing linearly from 1 to a small positive floor.
    """
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if family not in SCHEDULE_FAMILIES:
        raise ConfigError(f"unknown schedule family {family!r}; expected one of {SCHEDULE_FAMILIES}")

    t = np.arange(T + 1, dtype=np.float64) / T
    if family == "cosine":
        s = _COSINE_OFFSET
        profile = np.cos((t + s) / (1.0 + s) * math.pi / 2.0) ** 2
        alpha_sq = np.maximum(profile / profile[0], _COSINE_ALPHA_SQ_MIN)
    else:
        alpha = 1.0 - (1.0 - _LINEAR_ALPHA_MIN) * t
        alpha_sq = alpha**2

    alpha = np.sqrt(np.clip(alpha_sq, 0.0, 1.0))
    alpha[0] = 1.0
    sigma = np.sqrt(np.clip(1.0 - alpha**2, 0.0, 1.0))
    sigma[0] = 0.0
    w = np.ones(T + 1, dtype=np.float64)
    return NoiseSchedule(T=T, alpha=alpha, sigma=sigma, w=w, family=family)


def forward_diffuse(x0: torch.Tensor, t: int, noise: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Corrupt x0 at step t: alpha[t] * x0 + sigma[t] * noise."""
    if x0.shape != noise.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != noise shape {tuple(noise.shape)}")
    if not 0 <= t <= s.T:
        raise RangeError(f"timestep {t} outside [0, {s.T}]")
    return float(s.alpha[t]) * x0 + float(s.sigma[t]) * noise


def sample_timestep(rng: np.random.Generator, s: NoiseSchedule) -> int:
    """Draw a training timestep uniformly from {1, ..., T}."""
    return int(rng.integers(1, s.T + 1))
