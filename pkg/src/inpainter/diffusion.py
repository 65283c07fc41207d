"""Core diffusion mechanics: noise schedule, forward process, DDIM sampling.

Implements the closed-form forward process

    z_t = sqrt(abar_t) * z_0 + sqrt(1 - abar_t) * eps

and the deterministic DDIM update

    z_prev = (sqrt(abar_prev) / sqrt(abar_t)) * z_t
             + sqrt(abar_prev) * (sqrt(1/abar_prev - 1) - sqrt(1/abar_t - 1)) * eps_hat

where abar_t is the cumulative product of per-step signal coefficients
(1 - beta_t), indexed t = 0..T with abar_0 = 1.

All operations are pure functions over immutable inputs; the sampler holds
per-run state only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .errors import NumericDivergenceError, ParameterError, ShapeError

Tensor = torch.Tensor

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients abar_t for t = 0..T.

    abar is stored in float64; per-op coefficients are cast to the dtype of
    the tensors they scale so callers control working precision. beta_start
    and beta_end record the ramp the schedule was built from (checkpoints
    persist them so a schedule can be rebuilt exactly).
    """

    T: int
    alpha_bar: np.ndarray  # shape (T+1,), float64, abar[0] == 1.0
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def __post_init__(self):
        if self.T < 1:
            raise ParameterError(f"T must be >= 1, got {self.T}")
        if self.alpha_bar.shape != (self.T + 1,):
            raise ShapeError(
                f"alpha_bar must have shape ({self.T + 1},), got {self.alpha_bar.shape}"
            )
        if self.alpha_bar[0] != 1.0:
            raise ParameterError("alpha_bar[0] must be exactly 1")
        if np.any(self.alpha_bar <= 0.0) or np.any(self.alpha_bar > 1.0):
            raise ParameterError("alpha_bar values must lie in (0, 1]")
        # strictly decreasing for any positive beta; non-increasing always
        if np.any(np.diff(self.alpha_bar) > 0.0):
            raise ParameterError("alpha_bar must be non-increasing")

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ParameterError(f"t must be in [0, {self.T}], got {t}")
        return float(self.alpha_bar[t])


@dataclass(frozen=True)
class SamplerConfig:
    """Inference hyperparameters: step count, guidance scale, seed."""

    steps: int = 50
    guidance_scale: float = 7.5
    seed: int = 0

    def validate(self, T: int) -> None:
        if not 1 <= self.steps <= T:
            raise ParameterError(f"steps must be in [1, {T}], got {self.steps}")
        if self.guidance_scale < 0:
            raise ParameterError(
                f"guidance_scale must be >= 0, got {self.guidance_scale}"
            )


def make_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Build a linear per-step variance ramp and accumulate it.

    abar_t = prod_{s<=t} (1 - beta_s) with beta linearly spaced from
    beta_start to beta_end over T steps. abar_0 = 1 exactly.
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 <= beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=T, alpha_bar=alpha_bar, beta_start=beta_start, beta_end=beta_end)


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _coeffs(schedule: NoiseSchedule, t: int, dtype: torch.dtype) -> tuple[Tensor, Tensor]:
    abar = schedule.abar(t)
    signal = torch.tensor(math.sqrt(abar), dtype=dtype)
    noise = torch.tensor(math.sqrt(1.0 - abar), dtype=dtype)
    return signal, noise


def add_noise(z0: Tensor, eps: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
    """Forward process: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    _check_same_shape(z0, eps)
    signal, noise = _coeffs(schedule, t, z0.dtype)
    return signal * z0 + noise * eps


def ddim_step(
    z_t: Tensor, eps_hat: Tensor, t: int, t_prev: int, schedule: NoiseSchedule
) -> Tensor:
    """Deterministic DDIM update from step t to step t_prev (t_prev <= t)."""
    _check_same_shape(z_t, eps_hat)
    if not 0 <= t_prev <= t <= schedule.T:
        raise ParameterError(
            f"need 0 <= t_prev <= t <= T, got t_prev={t_prev}, t={t}, T={schedule.T}"
        )
    abar_t = schedule.abar(t)
    abar_prev = schedule.abar(t_prev)
    scale = math.sqrt(abar_prev) / math.sqrt(abar_t)
    shift = math.sqrt(abar_prev) * (
        math.sqrt(1.0 / abar_prev - 1.0) - math.sqrt(1.0 / abar_t - 1.0)
    )
    dtype = z_t.dtype
    return torch.tensor(scale, dtype=dtype) * z_t + torch.tensor(shift, dtype=dtype) * eps_hat


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Descending step subsequence [T, ..., 0]: a uniform stride when steps
    divides T, otherwise the nearest integer grid."""
    return [round(T * (1.0 - i / steps)) for i in range(steps + 1)]


Denoiser = Callable[[Tensor, int, Tensor], Tensor]
StepHook = Callable[[Tensor, int], Tensor]


def sample(
    denoiser: Denoiser,
    z_T: Tensor,
    cond: Tensor,
    uncond: Tensor,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    per_step_hook: Optional[StepHook] = None,
) -> Tensor:
    """Run the DDIM chain from z_T to z_0 with classifier-free guidance.

    The combined prediction is eps_u + s * (eps_c - eps_u); s = 1 and s = 0
    collapse to a single conditional / unconditional call so the trajectory is
    bit-identical to the single-prediction one. ``per_step_hook(z, t_prev)``
    is applied to the latent after every step when supplied.
    """
    cfg.validate(schedule.T)
    ts = sampling_timesteps(schedule.T, cfg.steps)
    z = z_T
    s = cfg.guidance_scale
    for i in range(len(ts) - 1):
        t, t_prev = ts[i], ts[i + 1]
        if s == 1.0:
            eps_hat = denoiser(z, t, cond)
        elif s == 0.0:
            eps_hat = denoiser(z, t, uncond)
        else:
            eps_c = denoiser(z, t, cond)
            eps_u = denoiser(z, t, uncond)
            eps_hat = eps_u + s * (eps_c - eps_u)
        z = ddim_step(z, eps_hat, t, t_prev, schedule)
        if per_step_hook is not None:
            z = per_step_hook(z, t_prev)
        if not torch.isfinite(z).all():
            raise NumericDivergenceError(
                f"latent became non-finite at step {i} (t={t} -> {t_prev})"
            )
    return z


def denoise_loss(
    denoiser: Denoiser,
    z0: Tensor,
    cond: Tensor,
    t: int,
    eps: Tensor,
    schedule: NoiseSchedule,
) -> Tensor:
    """Mean squared error between eps and the denoiser's prediction at step t."""
    _check_same_shape(z0, eps)
    z_t = add_noise(z0, eps, t, schedule)
    pred = denoiser(z_t, t, cond)
    _check_same_shape(pred, eps)
    return ((eps - pred) ** 2).mean()
