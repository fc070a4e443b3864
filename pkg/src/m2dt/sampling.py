"""Joint generation of ``n`` scenes and auto-regressive scene extension.

A denoiser is any callable ``(z, tv) -> v`` taking video rows ``(B, num_video,
token_dim)`` and per-segment timesteps ``(B, n)``. :class:`Pipeline` builds
one from trained parameters; :func:`oracle_denoiser` builds an exact one
from known clean latents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .diffusion import NoiseSchedule, ddim_step, make_zero_snr_schedule, timestep_grid
from .masks import AttentionMask, GroupedPlan, SegmentLayout, build_grouped_plan, uniform_layout
from .model import ModelConfig, Params, forward
from .objective import rows_of
from .synthetic import SyntheticSpec, text_ids_for

Tensor = torch.Tensor
Denoiser = Callable[[Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    seed: int = 0
    window: int | None = None


def oracle_denoiser(z_V: Tensor, sched: NoiseSchedule, layout: SegmentLayout) -> Denoiser:
    """Exact velocity for known clean rows ``z_V``; rows at ``t = 0`` get zeros."""

    def denoise(z: Tensor, tv: np.ndarray) -> Tensor:
        a, b = sched.coeffs(rows_of(tv, layout))
        a = torch.as_tensor(a, dtype=z.dtype)[..., None]
        b = torch.as_tensor(b, dtype=z.dtype)[..., None]
        safe_b = torch.where(b > 0, b, torch.ones_like(b))
        return torch.where(b > 0, (a * z - z_V) / safe_b, torch.zeros_like(z))

    return denoise


def _noise(shape, seed: int, dtype=torch.float32) -> Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(*shape, generator=gen, dtype=dtype)


def generate_fixed(denoiser: Denoiser, batch: int, layout: SegmentLayout, token_dim: int,
                   sched: NoiseSchedule, sampler: SamplerConfig) -> Tensor:
    """Denoise all segments jointly from pure noise with one shared timestep."""
    z = _noise((batch, layout.num_video, token_dim), sampler.seed)
    grid = timestep_grid(sched.T, sampler.steps)
    with torch.no_grad():
        for t, t_next in zip(grid[:-1], grid[1:]):
            tv = np.full((batch, layout.n), t, dtype=np.int64)
            z = ddim_step(z, denoiser(z, tv), t, t_next, sched)
    return z


def extend(denoiser: Denoiser, context: Tensor, layout: SegmentLayout, sched: NoiseSchedule,
           sampler: SamplerConfig) -> Tensor:
    """Generate the last segment given clean rows of the first ``n - 1``.

    ``context`` is ``(B, rows_before_last, token_dim)``. Context rows enter
    every denoiser call at ``t = 0`` and are returned unchanged.
    """
    last = layout.video_slice(layout.n - 1)
    if context.shape[-2] != last.start:
        raise ValueError(
            f"context has {context.shape[-2]} rows, expected {last.start} for {layout.n - 1} segments"
        )
    batch, token_dim = context.shape[0], context.shape[-1]
    x = _noise((batch, layout.video_len[-1], token_dim), sampler.seed, context.dtype)
    grid = timestep_grid(sched.T, sampler.steps)
    with torch.no_grad():
        for t, t_next in zip(grid[:-1], grid[1:]):
            tv = np.zeros((batch, layout.n), dtype=np.int64)
            tv[:, -1] = t
            v = denoiser(torch.cat([context, x], dim=-2), tv)
            x = ddim_step(x, v[..., last, :], t, t_next, sched)
    return torch.cat([context, x], dim=-2)


@dataclass
class Pipeline:
    """Trained denoiser plus everything needed to build its inputs."""

    params: Params
    cfg: ModelConfig
    layout: SegmentLayout
    structure: GroupedPlan | AttentionMask
    sched: NoiseSchedule
    spec: SyntheticSpec

    @classmethod
    def build(cls, params: Params, cfg: ModelConfig, spec: SyntheticSpec, n: int, variant) -> "Pipeline":
        layout = uniform_layout(n, spec.text_len, spec.V)
        return cls(params, cfg, layout, build_grouped_plan(layout, variant), make_zero_snr_schedule(cfg.max_T),
                   spec)

    @property
    def n(self) -> int:
        return self.layout.n

    def denoiser(self, prompts: np.ndarray) -> Denoiser:
        text_ids = text_ids_for(np.asarray(prompts), self.spec)

        def denoise(z: Tensor, tv: np.ndarray) -> Tensor:
            return forward(self.params, self.cfg, self.layout, self.structure, text_ids, z, tv)

        return denoise

    def _check_window(self, sampler: SamplerConfig) -> None:
        if sampler.window is not None and sampler.window != self.n:
            raise ValueError(f"sampler window {sampler.window} != model segment count {self.n}")

    def generate_fixed(self, prompts, sampler: SamplerConfig) -> Tensor:
        """``prompts`` is ``(B, n)``; returns segments ``(B, n, V, token_dim)``."""
        prompts = np.atleast_2d(np.asarray(prompts))
        if prompts.shape[-1] != self.n:
            raise ValueError(f"expected {self.n} prompts per sample, got {prompts.shape[-1]}")
        self._check_window(sampler)
        rows = generate_fixed(self.denoiser(prompts), len(prompts), self.layout, self.cfg.token_dim, self.sched,
                              sampler)
        return rows.reshape(len(prompts), self.n, self.spec.V, self.cfg.token_dim)

    def extend(self, context: Tensor, context_prompts, new_prompt, sampler: SamplerConfig) -> Tensor:
        """``context`` is ``(B, n-1, V, d)``; returns all ``n`` segments ``(B, n, V, d)``."""
        context = torch.as_tensor(context)
        context_prompts = np.atleast_2d(np.asarray(context_prompts))
        if context.shape[1] != self.n - 1 or context_prompts.shape[-1] != self.n - 1:
            raise ValueError(f"extension needs exactly {self.n - 1} context segments")
        self._check_window(sampler)
        B = context.shape[0]
        new_prompt = np.broadcast_to(np.asarray(new_prompt).reshape(-1, 1), (B, 1))
        prompts = np.concatenate([context_prompts, new_prompt], axis=1)
        rows = extend(self.denoiser(prompts), context.reshape(B, -1, self.cfg.token_dim), self.layout, self.sched,
                      sampler)
        return rows.reshape(B, self.n, self.spec.V, self.cfg.token_dim)

    def extend_many(self, initial: Tensor, initial_prompts, prompt_stream: Sequence, k: int,
                    sampler: SamplerConfig, on_window: Callable[[int, list[int]], None] | None = None) -> Tensor:
        """Extend ``k`` times with a sliding window of the latest ``n - 1`` segments.

        Returns the ``k`` new segments ``(B, k, V, d)``. Extension ``j`` uses
        sampler seed ``seed + j``. ``on_window(j, ids)`` reports which
        segment indices (0-based, initial segments first) were in context.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        prompt_stream = list(prompt_stream)
        if not prompt_stream:
            raise ValueError("empty prompt stream")
        window = list(torch.as_tensor(initial).unbind(1))
        window_prompts = list(np.atleast_2d(np.asarray(initial_prompts)).T)
        window_ids = list(range(len(window)))
        produced = []
        for j in range(k):
            prompt = prompt_stream[min(j, len(prompt_stream) - 1)]
            if on_window is not None:
                on_window(j, list(window_ids))
            step_sampler = SamplerConfig(sampler.steps, sampler.seed + j, sampler.window)
            out = self.extend(torch.stack(window, 1), np.stack(window_prompts, 1), prompt, step_sampler)
            new = out[:, -1]
            produced.append(new)
            window = window[1:] + [new]
            window_prompts = window_prompts[1:] + [np.broadcast_to(np.asarray(prompt).reshape(-1), (new.shape[0],))]
            window_ids = window_ids[1:] + [len(window) + j]
        return torch.stack(produced, 1)
