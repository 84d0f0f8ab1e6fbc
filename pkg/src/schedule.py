"""Diffusion noise schedule and the forward noising process."""

from dataclasses import dataclass, field

import numpy as np

from .config import config
from .numerics import DimensionError, Tensor, as_tensor


class TimestepRangeError(IndexError):
    """Raised when a timestep falls outside the schedule."""
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Betas and their cumulative products, in float64."""
    steps: int
    betas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at ``t``; ``t = -1`` denotes the clean sample (1.0)."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.steps:
            raise TimestepRangeError(f"timestep {t} outside [0, {self.steps})")
        return float(self.alpha_bars[t])


def linear_beta_schedule(
    steps: int = None,
    beta0: float = None,
    betaT: float = None,
    kind: str = None
) -> NoiseSchedule:
    """
    Build a noise schedule with betas interpolated between two endpoints.

    Args:
        steps: Number of diffusion steps (default from config)
        beta0: First beta (default from config)
        betaT: Last beta (default from config)
        kind: "linear" interpolates beta, "scaled_linear" interpolates sqrt(beta)

    Returns:
        NoiseSchedule with both endpoints included exactly

    Raises:
        ValueError: If the step count or the beta range is invalid
    """
    steps = config.schedule.steps if steps is None else steps
    beta0 = config.schedule.beta_start if beta0 is None else beta0
    betaT = config.schedule.beta_end if betaT is None else betaT
    kind = kind or config.schedule.kind

    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    if not 0.0 < beta0 <= betaT < 1.0:
        raise ValueError(f"betas must satisfy 0 < beta0 <= betaT < 1, got {beta0}, {betaT}")

    if kind == "linear":
        betas = np.linspace(beta0, betaT, steps, dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace(np.sqrt(beta0), np.sqrt(betaT), steps, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown schedule kind '{kind}'")
    # linspace may drift in the last ulp
    betas[0], betas[-1] = beta0, betaT

    alpha_bars = np.cumprod(1.0 - betas)
    betas.flags.writeable = False
    alpha_bars.flags.writeable = False
    return NoiseSchedule(steps=steps, betas=betas, alpha_bars=alpha_bars)


def add_noise(x0: Tensor, noise: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    """Forward process: ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise``."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if x0.shape != noise.shape:
        raise DimensionError(f"x0 {x0.shape} and noise {noise.shape} differ")
    if not 0 <= t < sched.steps:
        raise TimestepRangeError(f"timestep {t} outside [0, {sched.steps})")
    abar = sched.alpha_bars[t]
    return as_tensor(np.sqrt(abar) * x0.astype(np.float64) + np.sqrt(1.0 - abar) * noise.astype(np.float64))
