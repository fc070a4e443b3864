"""Desk-scale consistency evaluation of a trained pipeline."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from .sampling import Pipeline, SamplerConfig
from .synthetic import PrototypeBank, decode_segments, sample_sft, semantic_consistency, style_consistency

REPORT_HEADER = ["metric", "value", "n_samples", "seed"]


def evaluate(pipe: Pipeline, bank: PrototypeBank, n_samples: int = 200, seed: int = 0, steps: int = 50,
             chunk: int = 200) -> dict[str, float]:
    """Joint-generation and extension metrics over ``n_samples`` seeded samples.

    Joint generation draws independent prompts per segment. Extension uses
    the first ``n - 1`` segments of a coherent sample as context and scores
    whether the new segment decodes to the context's style.
    """
    spec, n = pipe.spec, pipe.n
    rng = np.random.default_rng([seed, 0])
    prompts = rng.integers(0, spec.C, size=(n_samples, n))
    fixed = []
    for i, start in enumerate(range(0, n_samples, chunk)):
        part = prompts[start:start + chunk]
        fixed.append(pipe.generate_fixed(part, SamplerConfig(steps, seed * 1000 + i)))
    fixed = torch.cat(fixed)

    data = sample_sft(spec, bank, n, np.random.default_rng([seed, 1]), n_samples)
    context = data.z_V.reshape(n_samples, n, spec.V, spec.d)[:, : n - 1]
    new_prompts = rng.integers(0, spec.C, size=n_samples)
    extended = []
    for i, start in enumerate(range(0, n_samples, chunk)):
        sl = slice(start, start + chunk)
        out = pipe.extend(context[sl], data.prompts[sl, : n - 1], new_prompts[sl],
                          SamplerConfig(steps, seed * 1000 + 500 + i))
        extended.append(out[:, -1])
    extended = torch.cat(extended)
    ext_styles, ext_prompts = decode_segments(bank, extended)

    return {
        "semantic_consistency": semantic_consistency(bank, fixed, prompts),
        "style_consistency": style_consistency(bank, fixed),
        "extend_style_accuracy": float(np.mean(ext_styles == data.styles[:, 0])),
        "extend_semantic_consistency": float(np.mean(ext_prompts == new_prompts)),
    }


def write_report(path: str | Path, metrics: dict[str, float], n_samples: int, seed: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_HEADER)
        for name, value in metrics.items():
            writer.writerow([name, repr(float(value)), n_samples, seed])
