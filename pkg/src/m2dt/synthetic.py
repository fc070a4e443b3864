"""Seeded multi-scene stand-in task, consistency metrics and the leakage probe.

Each (style, prompt) pair owns a prototype clip of ``V`` unit-norm rows in
``d`` dimensions. A scene is its prototype plus Gaussian noise. Styles play
the role of shared visual identity across scenes, prompts the role of the
per-scene text. Decoding a clip means finding its nearest prototype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .masks import GroupedPlan, MaskVariant, SegmentLayout, block_matrix, build_grouped_plan
from .model import ModelConfig, Params, forward, init_params, num_layers
from .objective import BatchSample

MAX_BANK_RETRIES = 16


@dataclass(frozen=True)
class SyntheticSpec:
    S: int = 4
    C: int = 8
    V: int = 16
    d: int = 8
    sigma: float = 0.05
    seed: int = 0
    text_len: int = 2

    def __post_init__(self):
        if min(self.S, self.C, self.V, self.d, self.text_len) < 1:
            raise ValueError("S, C, V, d and text_len must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @property
    def text_vocab(self) -> int:
        # prompt ids 0..C-1 plus one end-of-text filler id
        return self.C + 1

    @property
    def min_separation(self) -> float:
        return 4.0 * self.sigma


@dataclass(frozen=True)
class PrototypeBank:
    P: np.ndarray  # (S, C, V, d) float32

    @property
    def S(self) -> int:
        return self.P.shape[0]

    @property
    def C(self) -> int:
        return self.P.shape[1]

    def flat(self) -> np.ndarray:
        return self.P.reshape(self.S * self.C, -1)

    def separation(self) -> float:
        flat = self.flat().astype(np.float64)
        if len(flat) < 2:
            return float("inf")
        sq = (flat ** 2).sum(1)
        d2 = sq[:, None] + sq[None, :] - 2 * flat @ flat.T
        np.fill_diagonal(d2, np.inf)
        return float(np.sqrt(max(d2.min(), 0.0)))


def make_prototypes(spec: SyntheticSpec) -> PrototypeBank:
    """Prototype clips ``normalize_rows(style_part[s] + prompt_part[c])``."""
    for attempt in range(MAX_BANK_RETRIES):
        rng = np.random.default_rng([spec.seed, attempt])
        style = rng.standard_normal((spec.S, 1, spec.V, spec.d))
        prompt = rng.standard_normal((1, spec.C, spec.V, spec.d))
        P = style + prompt
        P /= np.linalg.norm(P, axis=-1, keepdims=True)
        bank = PrototypeBank(P.astype(np.float32))
        if bank.separation() >= spec.min_separation:
            return bank
    raise ValueError(
        f"could not reach prototype separation {spec.min_separation:.4g} in {MAX_BANK_RETRIES} attempts"
    )


def text_ids_for(prompts: np.ndarray, spec: SyntheticSpec) -> torch.Tensor:
    """Text tokens ``[prompt, END, END, ...]`` per segment, packed along the last axis."""
    prompts = np.asarray(prompts, dtype=np.int64)
    ids = np.full(prompts.shape + (spec.text_len,), spec.C, dtype=np.int64)
    ids[..., 0] = prompts
    return torch.from_numpy(ids.reshape(*prompts.shape[:-1], -1))


def render(bank: PrototypeBank, styles: np.ndarray, prompts: np.ndarray, sigma: float,
           rng: np.random.Generator) -> np.ndarray:
    """Clips for ``(..., n)`` label arrays, shaped ``(..., n, V, d)``."""
    clean = bank.P[styles, prompts]
    if sigma == 0:
        return clean.copy()
    return (clean + sigma * rng.standard_normal(clean.shape)).astype(np.float32)


def _to_batch(bank: PrototypeBank, spec: SyntheticSpec, styles, prompts, rng) -> BatchSample:
    clips = render(bank, styles, prompts, spec.sigma, rng)
    B, n = styles.shape
    z_V = torch.from_numpy(clips.reshape(B, n * spec.V, spec.d))
    return BatchSample(
        text_ids=text_ids_for(prompts, spec),
        z_V=z_V,
        eps=torch.zeros_like(z_V),
        t=np.zeros((B, n), dtype=np.int64),
        m_c=np.ones((B, n), dtype=np.int64),
        styles=styles,
        prompts=prompts,
    )


def sample_pretrain(spec: SyntheticSpec, bank: PrototypeBank, n: int, rng: np.random.Generator,
                    batch: int = 1) -> BatchSample:
    """Unrelated scenes: every segment draws its own style and prompt."""
    styles = rng.integers(0, spec.S, size=(batch, n))
    prompts = rng.integers(0, spec.C, size=(batch, n))
    return _to_batch(bank, spec, styles, prompts, rng)


def sample_sft(spec: SyntheticSpec, bank: PrototypeBank, n: int, rng: np.random.Generator,
               batch: int = 1) -> BatchSample:
    """Coherent scenes: one style per sample, independent prompts per segment."""
    styles = np.repeat(rng.integers(0, spec.S, size=(batch, 1)), n, axis=1)
    prompts = rng.integers(0, spec.C, size=(batch, n))
    return _to_batch(bank, spec, styles, prompts, rng)


def decode_segments(bank: PrototypeBank, segments) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-prototype ``(style, prompt)`` for ``(..., V, d)`` clips; ties go to the lowest index."""
    seg = segments.detach().cpu().numpy() if isinstance(segments, torch.Tensor) else np.asarray(segments)
    lead = seg.shape[:-2]
    x = seg.reshape(-1, bank.P.shape[2] * bank.P.shape[3]).astype(np.float64)
    flat = bank.flat().astype(np.float64)
    d2 = ((x[:, None, :] - flat[None, :, :]) ** 2).sum(-1)
    best = np.argmin(d2, axis=1).reshape(lead)
    return best // bank.C, best % bank.C


def decode_segment(bank: PrototypeBank, segment) -> tuple[int, int]:
    s, c = decode_segments(bank, segment)
    return int(s), int(c)


def semantic_consistency(bank: PrototypeBank, segments, prompts) -> float:
    _, decoded = decode_segments(bank, segments)
    return float(np.mean(decoded == np.asarray(prompts)))


def style_consistency(bank: PrototypeBank, segments) -> float:
    """Fraction of samples (``(N, n, V, d)``) whose segments all decode to one style."""
    styles, _ = decode_segments(bank, segments)
    return float(np.mean(np.all(styles == styles[..., :1], axis=-1)))


def as_segments(rows, layout: SegmentLayout) -> torch.Tensor:
    """Reshape video rows ``(B, n*V, d)`` to ``(B, n, V, d)`` for equal-length layouts."""
    if len(set(layout.video_len)) != 1:
        raise ValueError("segment view needs equal video lengths")
    rows = torch.as_tensor(rows)
    return rows.reshape(*rows.shape[:-2], layout.n, layout.video_len[0], rows.shape[-1])


def reachability(n: int, variant: MaskVariant | str, depth: int) -> np.ndarray:
    """``out[i, j]``: can text group ``j`` influence video group ``i`` within ``depth`` layers."""
    step = block_matrix(n, variant) | np.eye(2 * n, dtype=bool)
    reach = np.eye(2 * n, dtype=bool)
    for _ in range(depth):
        reach = (step.astype(np.int64) @ reach.astype(np.int64)) > 0
    return reach[n:, :n]


def probe_params(cfg: ModelConfig, seed: int) -> Params:
    """Fully random weights, so no path is silenced by zero initialisation."""
    gen = torch.Generator().manual_seed(int(seed))
    out = {}
    for k, v in init_params(cfg, seed).items():
        noise = torch.randn(v.shape, generator=gen) * (0.3 if v.dim() > 1 else 0.1)
        out[k] = v + noise if k.endswith(".g") else noise
    return out


def leakage_probe(params: Params, cfg: ModelConfig, layout: SegmentLayout, variant: MaskVariant | str,
                  depths=(1, 2), seed: int = 0, structure: GroupedPlan | None = None) -> dict:
    """Compare observed text-to-video influence with mask-support reachability.

    For each depth ``k`` the first ``k`` blocks are run twice, with the text
    ids of one segment swapped, and every video segment's output rows are
    compared bitwise.
    """
    variant = MaskVariant.parse(variant)
    structure = structure or build_grouped_plan(layout, variant)
    rng = np.random.default_rng(seed)
    text_ids = torch.from_numpy(rng.integers(0, cfg.text_vocab, size=layout.num_text))
    z = torch.from_numpy(rng.standard_normal((layout.num_video, cfg.token_dim)).astype(np.float32))
    tv = rng.integers(0, cfg.max_T + 1, size=layout.n)
    report = {"variant": variant.value, "n": layout.n, "depths": {}}
    with torch.no_grad():
        for k in depths:
            if k > num_layers(params):
                raise ValueError(f"probe depth {k} exceeds model depth {num_layers(params)}")
            base = forward(params, cfg, layout, structure, text_ids, z, tv, depth=k)
            observed = np.zeros((layout.n, layout.n), dtype=bool)
            for j in range(layout.n):
                ids = text_ids.clone()
                a, b = layout.group_span(j)
                ids[a:b] = (ids[a:b] + 1) % cfg.text_vocab
                out = forward(params, cfg, layout, structure, ids, z, tv, depth=k)
                for i in range(layout.n):
                    rows = layout.video_slice(i)
                    observed[i, j] = not torch.equal(out[rows], base[rows])
            predicted = reachability(layout.n, variant, k)
            report["depths"][k] = {
                "observed": observed,
                "predicted": predicted,
                "match": bool(np.array_equal(observed, predicted)),
            }
    report["match"] = all(v["match"] for v in report["depths"].values())
    return report


def chi_square_independence(a: np.ndarray, b: np.ndarray, ka: int, kb: int) -> float:
    """Pearson chi-square statistic of the ``ka x kb`` contingency table of two label arrays."""
    table = np.zeros((ka, kb))
    np.add.at(table, (a, b), 1)
    expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / table.sum()
    mask = expected > 0
    return float((((table - expected) ** 2)[mask] / expected[mask]).sum())
