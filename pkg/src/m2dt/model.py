"""Toy encoder-only transformer denoiser over the packed multi-segment sequence.

Parameters live in a flat ``dict[str, Tensor]`` so they map one-to-one onto
checkpoint tensors and optimizer state.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .attention import AttentionWeights, attend
from .diffusion import NoiseSchedule
from .masks import AttentionMask, GroupedPlan, SegmentLayout
from .objective import BatchSample, masked_v_loss, prepare_inputs

Tensor = torch.Tensor
Params = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    text_vocab: int = 9
    token_dim: int = 8
    max_T: int = 100
    max_len: int = 64

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "depth":
                if value < 0:
                    raise ValueError("depth must be >= 0")
            elif value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 2:
            raise ValueError("dim must be even for the sinusoidal timestep features")


def init_params(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> Params:
    gen = torch.Generator().manual_seed(int(seed))
    d = cfg.dim

    def randn(*shape, scale):
        return torch.randn(*shape, generator=gen, dtype=dtype) * scale

    p: Params = {
        "text_emb": randn(cfg.text_vocab, d, scale=1.0),
        "in_w": randn(cfg.token_dim, d, scale=1.0 / math.sqrt(cfg.token_dim)),
        "in_b": torch.zeros(d, dtype=dtype),
        "pos": randn(cfg.max_len, d, scale=0.5),
        "t_w1": randn(d, d, scale=1.0 / math.sqrt(d)),
        "t_b1": torch.zeros(d, dtype=dtype),
        "t_w2": randn(d, d, scale=1.0 / math.sqrt(d)),
        "t_b2": torch.zeros(d, dtype=dtype),
    }
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        p[pre + "ln1.g"] = torch.ones(d, dtype=dtype)
        p[pre + "ln1.b"] = torch.zeros(d, dtype=dtype)
        p[pre + "attn.wq"] = randn(d, d, scale=1.0 / math.sqrt(d))
        p[pre + "attn.wk"] = randn(d, d, scale=1.0 / math.sqrt(d))
        p[pre + "attn.wv"] = randn(d, d, scale=1.0 / math.sqrt(d))
        p[pre + "attn.wo"] = torch.zeros(d, d, dtype=dtype)
        p[pre + "ln2.g"] = torch.ones(d, dtype=dtype)
        p[pre + "ln2.b"] = torch.zeros(d, dtype=dtype)
        p[pre + "mlp.w1"] = randn(d, 4 * d, scale=1.0 / math.sqrt(d))
        p[pre + "mlp.b1"] = torch.zeros(4 * d, dtype=dtype)
        p[pre + "mlp.w2"] = torch.zeros(4 * d, d, dtype=dtype)
        p[pre + "mlp.b2"] = torch.zeros(d, dtype=dtype)
    p["out_w"] = randn(d, cfg.token_dim, scale=1.0 / math.sqrt(d))
    p["out_b"] = torch.zeros(cfg.token_dim, dtype=dtype)
    return p


def cast_params(params: Params, dtype: torch.dtype) -> Params:
    return {k: v.detach().to(dtype) for k, v in params.items()}


def timestep_features(t: Tensor, dim: int, dtype: torch.dtype) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).to(dtype)


def timestep_embedding(params: Params, t: Tensor) -> Tensor:
    dim = params["t_w1"].shape[0]
    h = timestep_features(t, dim, params["t_w1"].dtype)
    h = F.silu(h @ params["t_w1"] + params["t_b1"])
    return h @ params["t_w2"] + params["t_b2"]


def pack_text_ids(per_segment, layout: SegmentLayout) -> Tensor:
    """Concatenate per-segment token id lists into one ``(num_text,)`` tensor."""
    if len(per_segment) != layout.n:
        raise ValueError(f"expected {layout.n} text id lists, got {len(per_segment)}")
    for i, ids in enumerate(per_segment):
        if len(ids) != layout.text_len[i]:
            raise ValueError(f"segment {i} has {len(ids)} text ids, layout expects {layout.text_len[i]}")
    return torch.tensor([int(v) for ids in per_segment for v in ids], dtype=torch.long)


def block_attention_weights(params: Params, layer: int, heads: int) -> AttentionWeights:
    pre = f"blocks.{layer}.attn."
    return AttentionWeights(heads, params[pre + "wq"], params[pre + "wk"], params[pre + "wv"], params[pre + "wo"])


def num_layers(params: Params) -> int:
    return sum(1 for k in params if k.endswith(".attn.wq"))


def forward(params: Params, cfg: ModelConfig, layout: SegmentLayout, structure: GroupedPlan | AttentionMask,
            text_ids: Tensor, z_in: Tensor, tv, depth: int | None = None) -> Tensor:
    """Predict velocity for the video rows.

    ``text_ids`` is ``(..., num_text)``, ``z_in`` is ``(..., num_video,
    token_dim)`` and ``tv`` holds one timestep per segment, ``(..., n)``.
    Leading batch dims must agree. ``depth`` runs only the first blocks.
    """
    text_ids = torch.as_tensor(text_ids, dtype=torch.long)
    tv = torch.as_tensor(np.asarray(tv), dtype=torch.long)
    if text_ids.shape[-1] != layout.num_text:
        raise ValueError(f"got {text_ids.shape[-1]} text ids, layout expects {layout.num_text}")
    if z_in.shape[-2:] != (layout.num_video, cfg.token_dim):
        raise ValueError(f"video input shape {tuple(z_in.shape[-2:])} != {(layout.num_video, cfg.token_dim)}")
    if tv.shape[-1] != layout.n:
        raise ValueError(f"timestep vector has {tv.shape[-1]} entries, layout has {layout.n} segments")
    if layout.total_len > cfg.max_len:
        raise ValueError(f"sequence length {layout.total_len} exceeds max_len {cfg.max_len}")
    if text_ids.numel() and (text_ids.min() < 0 or text_ids.max() >= cfg.text_vocab):
        raise ValueError(f"text id out of vocabulary [0, {cfg.text_vocab})")
    if tv.numel() and (tv.min() < 0 or tv.max() > cfg.max_T):
        raise ValueError(f"timestep out of range [0, {cfg.max_T}]")

    h_text = params["text_emb"][text_ids]
    h_video = z_in @ params["in_w"] + params["in_b"]
    h = torch.cat([h_text, h_video], dim=-2)
    h = h + params["pos"][: layout.total_len]
    temb = timestep_embedding(params, tv)
    h = h + temb[..., torch.as_tensor(layout.token_segment()), :]

    dim = cfg.dim
    layers = num_layers(params) if depth is None else depth
    for i in range(layers):
        pre = f"blocks.{i}."
        a = F.layer_norm(h, (dim,), params[pre + "ln1.g"], params[pre + "ln1.b"])
        h = h + attend(a, block_attention_weights(params, i, cfg.heads), structure)
        m = F.layer_norm(h, (dim,), params[pre + "ln2.g"], params[pre + "ln2.b"])
        m = F.gelu(m @ params[pre + "mlp.w1"] + params[pre + "mlp.b1"])
        h = h + m @ params[pre + "mlp.w2"] + params[pre + "mlp.b2"]

    h_video = h[..., layout.num_text:, :]
    return h_video @ params["out_w"] + params["out_b"]


def loss_and_grads(params: Params, cfg: ModelConfig, batch: BatchSample, layout: SegmentLayout,
                   structure: GroupedPlan | AttentionMask, sched: NoiseSchedule,
                   m_c=None, with_output_grad: bool = False):
    """Masked v-prediction loss and exact reverse-mode gradients.

    ``m_c`` overrides the batch's conditional mask when given. Returns
    ``(loss, grads)`` or ``(loss, grads, dloss_dv)`` with ``with_output_grad``.
    """
    if m_c is not None:
        m_c = np.broadcast_to(np.asarray(m_c), batch.m_c.shape).copy()
        batch = BatchSample(batch.text_ids, batch.z_V, batch.eps, batch.t, m_c, batch.styles, batch.prompts)
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    z_in, target = prepare_inputs(batch, layout, sched)
    v_pred = forward(leaves, cfg, layout, structure, batch.text_ids, z_in, batch.t)
    if with_output_grad:
        v_pred.retain_grad()
    loss = masked_v_loss(v_pred, target, batch.m_c, layout)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    names = list(leaves)
    inputs = [leaves[k] for k in names] + ([v_pred] if with_output_grad else [])
    grads = torch.autograd.grad(loss, inputs, allow_unused=True)
    grad_dict = {k: (g if g is not None else torch.zeros_like(leaves[k])) for k, g in zip(names, grads)}
    if with_output_grad:
        return loss.item(), grad_dict, grads[-1]
    return loss.item(), grad_dict
