"""Dense masked attention and its mask-free grouped execution.

Both paths share the same projections; they only differ in how the set of
keys visible to each query is expressed. The dense path builds an ``L x L``
score matrix and masks it, the grouped path runs one cross-attention per
query group against the concatenated key/value spans of that group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .masks import AttentionMask, GroupedPlan

Tensor = torch.Tensor

# additive bias for disallowed keys; exp() of it underflows to exactly 0
MASK_BIAS = -1e9


@dataclass
class AttentionWeights:
    """Multi-head projections; per-head matrices are column blocks of ``wq/wk/wv``."""

    heads: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def __post_init__(self):
        dim = self.wq.shape[0]
        if dim % self.heads:
            raise ValueError(f"dim {dim} not divisible by heads {self.heads}")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (dim, dim):
                raise ValueError(f"{name} has shape {tuple(getattr(self, name).shape)}, expected {(dim, dim)}")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def random(cls, dim: int, heads: int, generator: torch.Generator | None = None,
               dtype=torch.float32) -> "AttentionWeights":
        scale = 1.0 / math.sqrt(dim)
        mats = [torch.randn(dim, dim, generator=generator, dtype=dtype) * scale for _ in range(4)]
        return cls(heads, *mats)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, rows, dim = x.shape
    return x.reshape(*lead, rows, heads, dim // heads).transpose(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, rows, hd = x.shape
    return x.transpose(-3, -2).reshape(*lead, rows, heads * hd)


def _check_input(x: Tensor, w: AttentionWeights, rows: int) -> None:
    if x.shape[-1] != w.dim:
        raise ValueError(f"input width {x.shape[-1]} != attention dim {w.dim}")
    if x.shape[-2] != rows:
        raise ValueError(f"input has {x.shape[-2]} rows, expected {rows}")
    if not torch.isfinite(x).all():
        raise ValueError("non-finite attention input")


def masked_softmax(scores: Tensor, allowed: Tensor) -> Tensor:
    scores = scores.masked_fill(~allowed, MASK_BIAS)
    scores = scores - scores.amax(dim=-1, keepdim=True)
    weights = torch.exp(scores) * allowed
    return weights / weights.sum(dim=-1, keepdim=True)


def masked_attention_dense(x: Tensor, w: AttentionWeights, mask: AttentionMask | Tensor | np.ndarray,
                           return_weights: bool = False):
    """Self-attention over ``x`` (``(..., L, dim)``) restricted by an ``L x L`` mask."""
    if isinstance(mask, AttentionMask):
        mask = mask.dense()
    allowed = torch.as_tensor(np.asarray(mask), dtype=torch.bool) if not isinstance(mask, Tensor) else mask.bool()
    L = allowed.shape[-1]
    _check_input(x, w, L)
    if not allowed.any(dim=-1).all():
        raise ValueError("every mask row needs at least one permitted key")
    q = _split_heads(x @ w.wq, w.heads)
    k = _split_heads(x @ w.wk, w.heads)
    v = _split_heads(x @ w.wv, w.heads)
    scores = q @ k.transpose(-1, -2) / math.sqrt(w.head_dim)
    weights = masked_softmax(scores, allowed)
    out = _merge_heads(weights @ v) @ w.wo
    if return_weights:
        return out, weights
    return out


def grouped_attention(x: Tensor, w: AttentionWeights, plan: GroupedPlan) -> Tensor:
    """Run one cross-attention per plan group; never allocates an ``L x L`` mask."""
    _check_input(x, w, plan.L)
    plan.validate()
    q = _split_heads(x @ w.wq, w.heads)
    k = _split_heads(x @ w.wk, w.heads)
    v = _split_heads(x @ w.wv, w.heads)
    scale = 1.0 / math.sqrt(w.head_dim)
    pieces = []
    for g in sorted(plan.groups, key=lambda g: g.query[0]):
        qa, qb = g.query
        if len(g.kv) == 1:
            (ka, kb), = g.kv
            kg, vg = k[..., ka:kb, :], v[..., ka:kb, :]
        else:
            kg = torch.cat([k[..., a:b, :] for a, b in g.kv], dim=-2)
            vg = torch.cat([v[..., a:b, :] for a, b in g.kv], dim=-2)
        scores = (q[..., qa:qb, :] @ kg.transpose(-1, -2)) * scale
        pieces.append(torch.softmax(scores, dim=-1) @ vg)
    return _merge_heads(torch.cat(pieces, dim=-2)) @ w.wo


def attention_workload(plan_or_mask: GroupedPlan | AttentionMask) -> dict[str, int]:
    if isinstance(plan_or_mask, GroupedPlan):
        entries = sum(g.query_len * g.kv_len for g in plan_or_mask.groups)
        return {"score_entries": entries, "mask_bytes": 0}
    L = plan_or_mask.L
    return {"score_entries": L * L, "mask_bytes": (L * L + 7) // 8}


def attend(x: Tensor, w: AttentionWeights, structure: GroupedPlan | AttentionMask) -> Tensor:
    if isinstance(structure, GroupedPlan):
        return grouped_attention(x, w, structure)
    return masked_attention_dense(x, w, structure)
