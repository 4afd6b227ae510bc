"""Variance-preserving forward-noising schedules.

A schedule defines the pair (alpha_t, sigma_t) over continuous time
t in [0, 1] with alpha_t^2 + sigma_t^2 = 1, plus the noising operation
x_t = alpha_t * x0 + sigma_t * eps and the uniform timestep sampler over
[t_min, t_max].

Convention: t=0 is clean data, t=1 is pure noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("vp-cosine", "vp-linear")

# Default timestep windows: a narrow band for editing (large noise erases
# source detail), a wide one for generation from scratch.
EDIT_T_RANGE = (0.2, 0.5)
GENERATE_T_RANGE = (0.2, 0.98)


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process constants and the sampling window [t_min, t_max].

    t_min == t_max is allowed (degenerate window, deterministic timestep).
    """

    kind: str = "vp-cosine"
    t_min: float = EDIT_T_RANGE[0]
    t_max: float = EDIT_T_RANGE[1]

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}, expected one of {SCHEDULE_KINDS}")
        if not (0.0 <= self.t_min < 1.0):
            raise ValueError(f"t_min must lie in [0, 1), got {self.t_min}")
        if not (self.t_min <= self.t_max <= 1.0):
            raise ValueError(f"t_max must lie in [t_min, 1], got {self.t_max}")


@dataclass(frozen=True)
class StepDraw:
    """One optimization step's random draw: a timestep and Gaussian noise.

    ``eps`` has shape (d,) when the noise is shared across particles and
    (n, d) when drawn per particle.
    """

    t: float
    eps: np.ndarray = field(repr=False)

    def eps_for(self, i: int) -> np.ndarray:
        """Noise vector seen by particle i."""
        if self.eps.ndim == 1:
            return self.eps
        return self.eps[i]

    @property
    def shared(self) -> bool:
        return self.eps.ndim == 1


def alpha_sigma(schedule: NoiseSchedule, t):
    """Return (alpha_t, sigma_t); accepts scalar or array t in [0, 1]."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if schedule.kind == "vp-cosine":
        alpha = np.cos(0.5 * math.pi * t)
        sigma = np.sin(0.5 * math.pi * t)
    else:  # vp-linear
        alpha = np.sqrt(1.0 - t)
        sigma = np.sqrt(t)
    if t.ndim == 0:
        return float(alpha), float(sigma)
    return alpha, sigma


def noise_sample(schedule: NoiseSchedule, x0: np.ndarray, t: float, eps: np.ndarray) -> np.ndarray:
    """Forward-noise a clean vector: x_t = alpha_t * x0 + sigma_t * eps."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
    alpha, sigma = alpha_sigma(schedule, t)
    return alpha * x0 + sigma * eps


def sample_timestep(rng: np.random.Generator, schedule: NoiseSchedule) -> float:
    """Draw t uniformly from [t_min, t_max] (the endpoints may coincide)."""
    if schedule.t_max == schedule.t_min:
        return schedule.t_min
    return float(rng.uniform(schedule.t_min, schedule.t_max))
