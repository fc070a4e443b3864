"""Zero-terminal-SNR schedule and v-prediction algebra.

Convention: ``z_t = sqrt(abar_t) * z_V + sqrt(1 - abar_t) * eps`` and
``v = sqrt(abar_t) * eps - sqrt(1 - abar_t) * z_V``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

Tensor = torch.Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray  # float64, length T + 1

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    def coeffs(self, t):
        """``(sqrt(abar_t), sqrt(1 - abar_t))`` as float64 arrays shaped like ``t``."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t}")
        ab = self.alpha_bar[t]
        return np.sqrt(ab), np.sqrt(1.0 - ab)


def _base_alpha_bar(T: int, base: str) -> np.ndarray:
    if base == "linear":
        # DDPM betas, stretched so the endpoints match the T=1000 schedule
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, scale * 0.02, T, dtype=np.float64)
        betas = np.minimum(betas, 0.999)
        return np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    if base == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        return f / f[0]
    raise ValueError(f"unknown base schedule {base!r}")


def make_zero_snr_schedule(T: int, base: str = "linear") -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    sqrt_ab = np.sqrt(_base_alpha_bar(T, base))
    first, last = sqrt_ab[0], sqrt_ab[-1]
    sqrt_ab = (sqrt_ab - last) * (1.0 / (first - last))
    sqrt_ab[0], sqrt_ab[-1] = 1.0, 0.0
    ab = sqrt_ab ** 2
    if not np.all(np.diff(ab) < 0):
        raise ValueError("rescaled schedule is not strictly decreasing; increase T or change base")
    ab.setflags(write=False)
    return NoiseSchedule(ab)


def _bcast(c: np.ndarray, like: Tensor) -> Tensor:
    c = torch.as_tensor(c, dtype=like.dtype)
    return c.reshape(c.shape + (1,) * (like.dim() - c.dim())) if c.dim() else c


def _check_shapes(*xs: Tensor) -> None:
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(x.shape)}")


def forward_perturb(z_V: Tensor, eps: Tensor, t, sched: NoiseSchedule) -> Tensor:
    """Noise clean latents to step ``t``.

    ``t`` may be a scalar or an array whose shape is a prefix of the latent
    shape (e.g. one timestep per batch element).
    """
    _check_shapes(z_V, eps)
    a, b = sched.coeffs(t)
    return _bcast(a, z_V) * z_V + _bcast(b, z_V) * eps


def velocity_target(z_V: Tensor, eps: Tensor, t, sched: NoiseSchedule) -> Tensor:
    _check_shapes(z_V, eps)
    a, b = sched.coeffs(t)
    return _bcast(a, z_V) * eps - _bcast(b, z_V) * z_V


def recover_clean(z_t: Tensor, v: Tensor, t, sched: NoiseSchedule) -> tuple[Tensor, Tensor]:
    _check_shapes(z_t, v)
    a, b = sched.coeffs(t)
    a, b = _bcast(a, z_t), _bcast(b, z_t)
    return a * z_t - b * v, b * z_t + a * v


def ddim_step(z_t: Tensor, v_pred: Tensor, t, t_next, sched: NoiseSchedule) -> Tensor:
    t_arr, tn_arr = np.asarray(t), np.asarray(t_next)
    if np.any(tn_arr > t_arr):
        raise ValueError(f"ddim_step needs t_next <= t, got t={t}, t_next={t_next}")
    if np.all(tn_arr == t_arr):
        return z_t
    z0, eps = recover_clean(z_t, v_pred, t, sched)
    a, b = sched.coeffs(t_next)
    return _bcast(a, z_t) * z0 + _bcast(b, z_t) * eps


def timestep_grid(T: int, steps: int) -> list[int]:
    """Uniform descending grid ``T = t_0 > t_1 > ... > t_steps = 0``."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    grid = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    return [int(v) for v in grid]
