"""Diffusion noise schedule: cumulative signal levels, noising, timesteps.

The schedule stores alpha_bar[t] (cumulative product of 1 - beta) with
alpha_bar[0] = 1, so t = 0 means "no noise". Betas are linearly spaced,
matching the common latent-diffusion convention, so timestep indices line
up with externally captured attention records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012

WEIGHT_MODES = ("constant", "one_minus_alpha_bar")


class ScheduleError(ValueError):
    """Invalid schedule construction or out-of-range timestep."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal schedule alpha_bar over timesteps 0..T inclusive."""

    alpha_bar: np.ndarray
    weight_mode: str = "constant"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise ScheduleError(f"alpha_bar must be 1-D with length >= 2, got shape {ab.shape}")
        if not np.isfinite(ab).all():
            raise ScheduleError("alpha_bar must be finite")
        if ab[0] != 1.0:
            raise ScheduleError(f"alpha_bar[0] must be exactly 1, got {ab[0]}")
        if (ab <= 0).any() or (ab > 1).any():
            raise ScheduleError("alpha_bar entries must lie in (0, 1]")
        if (np.diff(ab) > 0).any():
            raise ScheduleError("alpha_bar must be non-increasing")
        if self.weight_mode not in WEIGHT_MODES:
            raise ScheduleError(
                f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}"
            )
        ab = ab.copy()
        ab.flags.writeable = False
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.alpha_bar.size - 1

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [0, {self.T}]")
        return t

    def signal(self, t: int) -> float:
        """sqrt(alpha_bar[t]), the coefficient on the clean value."""
        return math.sqrt(self.alpha_bar[self._check_t(t)])

    def noise_level(self, t: int) -> float:
        """sqrt(1 - alpha_bar[t]), the coefficient on the noise draw."""
        return math.sqrt(1.0 - self.alpha_bar[self._check_t(t)])

    def weight(self, t: int) -> float:
        """Residual weight w(t): 1 by default, or 1 - alpha_bar[t]."""
        t = self._check_t(t)
        if self.weight_mode == "constant":
            return 1.0
        return 1.0 - float(self.alpha_bar[t])


def linear_beta_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    weight_mode: str = "constant",
) -> NoiseSchedule:
    """Linearly spaced betas from beta_start to beta_end over T steps."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(
            f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - betas)))
    return NoiseSchedule(alpha_bar=alpha_bar, weight_mode=weight_mode)


def add_noise(x: np.ndarray, t: int, epsilon: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) * x + sqrt(1 - alpha_bar_t) * epsilon."""
    x = np.asarray(x, dtype=np.float64)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if x.shape != epsilon.shape:
        raise ScheduleError(f"x shape {x.shape} != epsilon shape {epsilon.shape}")
    return schedule.signal(t) * x + schedule.noise_level(t) * epsilon


def timestep_bounds(schedule: NoiseSchedule, range_fraction: float = 1.0) -> tuple[int, int]:
    """Inclusive sampling bounds: [ceil(0.02 T), floor(0.98 T)] shrunk by fraction."""
    if not 0.0 < range_fraction <= 1.0:
        raise ScheduleError(f"range_fraction must lie in (0, 1], got {range_fraction}")
    lo = math.ceil(0.02 * schedule.T)
    hi = math.floor(0.98 * schedule.T)
    if hi < lo:
        raise ScheduleError(f"schedule too short to sample from (T={schedule.T})")
    hi = lo + math.floor((hi - lo) * range_fraction)
    return lo, hi


def sample_timestep(
    rng: np.random.Generator, schedule: NoiseSchedule, range_fraction: float = 1.0
) -> int:
    """Uniform integer timestep within timestep_bounds, deterministic per rng."""
    lo, hi = timestep_bounds(schedule, range_fraction)
    return int(rng.integers(lo, hi + 1))
