"""Training samples and the segment-masked v-prediction objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import NoiseSchedule, forward_perturb, velocity_target
from .masks import SegmentLayout

Tensor = torch.Tensor


@dataclass
class BatchSample:
    """A packed batch. Leading dim ``B`` on every field.

    text_ids: ``(B, num_text)`` int64
    z_V, eps: ``(B, num_video, token_dim)``
    t: ``(B, n)`` per-segment timesteps
    m_c: ``(B, n)`` conditional mask (1 = segment is supervised and noised)
    styles, prompts: ``(B, n)`` ground-truth labels, kept for evaluation
    """

    text_ids: Tensor
    z_V: Tensor
    eps: Tensor
    t: np.ndarray
    m_c: np.ndarray
    styles: np.ndarray | None = None
    prompts: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.z_V.shape[0]

    def to(self, dtype: torch.dtype) -> "BatchSample":
        return BatchSample(self.text_ids, self.z_V.to(dtype), self.eps.to(dtype), self.t, self.m_c,
                           self.styles, self.prompts)

    def select(self, idx) -> "BatchSample":
        idx = np.asarray(idx)
        return BatchSample(
            self.text_ids[idx], self.z_V[idx], self.eps[idx], self.t[idx], self.m_c[idx],
            None if self.styles is None else self.styles[idx],
            None if self.prompts is None else self.prompts[idx],
        )


def rows_of(per_segment: np.ndarray, layout: SegmentLayout) -> np.ndarray:
    """Expand a ``(..., n)`` per-segment array to ``(..., num_video)`` video rows."""
    return np.asarray(per_segment)[..., layout.video_segment()]


def prepare_inputs(batch: BatchSample, layout: SegmentLayout, sched: NoiseSchedule) -> tuple[Tensor, Tensor]:
    """Model input ``z_t`` and velocity target for every video row.

    Segments with ``m_c == 0`` are conditioning context: their rows are the
    clean latents themselves, not a perturbation evaluated at ``t = 0``.
    """
    t_rows = rows_of(batch.t, layout)
    z_t = forward_perturb(batch.z_V, batch.eps, t_rows, sched)
    clean = torch.as_tensor(rows_of(batch.m_c, layout) == 0)[..., None]
    z_in = torch.where(clean, batch.z_V, z_t)
    target = velocity_target(batch.z_V, batch.eps, t_rows, sched)
    return z_in, target


def masked_v_loss(v_pred: Tensor, v_target: Tensor, m_c, layout: SegmentLayout) -> Tensor:
    """Mean squared error over the video rows of segments with ``m_c = 1``."""
    if v_pred.shape != v_target.shape:
        raise ValueError(f"shape mismatch: {tuple(v_pred.shape)} vs {tuple(v_target.shape)}")
    m_c = np.asarray(m_c, dtype=np.float64)
    if m_c.shape[-1] != layout.n:
        raise ValueError(f"conditional mask has {m_c.shape[-1]} entries, layout has {layout.n} segments")
    if not np.all(m_c.sum(axis=-1) > 0):
        raise ValueError("conditional mask selects no segment")
    weights = torch.as_tensor(rows_of(m_c, layout), dtype=v_pred.dtype)
    weights = weights.expand(v_pred.shape[:-1])[..., None].expand(v_pred.shape)
    sq = (v_pred - v_target) ** 2 * weights
    return sq.sum() / weights.sum()
