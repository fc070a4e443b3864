"""Two-stage training: unrelated-scene pre-training, then coherent-scene
fine-tuning that mixes in the conditional last-scene prediction task."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .checkpoint import load_tensors, save_tensors
from .diffusion import make_zero_snr_schedule
from .masks import MaskVariant, build_conditional_mask, build_grouped_plan, uniform_layout
from .model import ModelConfig, Params, init_params, loss_and_grads
from .objective import BatchSample
from .synthetic import PrototypeBank, SyntheticSpec, make_prototypes, sample_pretrain, sample_sft

log = logging.getLogger(__name__)

STAGES = ("pretrain", "sft")
METRICS_HEADER = ["step", "stage", "task", "loss", "grad_norm"]

DataSource = Callable[[SyntheticSpec, PrototypeBank, int, np.random.Generator, int], BatchSample]


@dataclass(frozen=True)
class TrainingConfig:
    stage: str = "pretrain"
    p: float = 0.5
    lr: float = 1e-5
    batch: int = 8
    steps: int = 10000
    n: int = 3
    variant: MaskVariant = MaskVariant.V2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", MaskVariant.parse(self.variant))
        if self.stage not in (*STAGES, "both"):
            raise ValueError(f"stage must be pretrain, sft or both, got {self.stage!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        if self.lr < 0 or self.batch < 1 or self.steps < 1 or self.n < 1:
            raise ValueError("lr must be >= 0 and batch, steps, n positive")

    @property
    def stages(self) -> tuple[str, ...]:
        return STAGES if self.stage == "both" else (self.stage,)


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def optimizer_step(params: Params, grads: Params, state: AdamState, lr: float,
                   betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01) -> Params:
    """AdamW with decoupled weight decay; a non-finite gradient skips the whole step."""
    if any(not torch.isfinite(g).all() for g in grads.values()):
        state.skipped += 1
        return params
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, param {tuple(p.shape)}")
        m = state.m.get(name, torch.zeros_like(p)) * b1 + (1 - b1) * g
        v = state.v.get(name, torch.zeros_like(p)) * b2 + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (torch.sqrt(v / c2) + eps)
        out[name] = p - lr * weight_decay * p - lr * update
    return out


def grad_norm(grads: Params) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))


class Trainer:
    """Owns params, optimizer state and the global step counter.

    Every step draws its randomness from generators keyed on
    ``(seed, global_step)``, so a run resumed from a checkpoint replays
    exactly what the uninterrupted run would have done.
    """

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainingConfig, spec: SyntheticSpec,
                 params: Params | None = None, opt_state: AdamState | None = None, global_step: int = 0,
                 bank: PrototypeBank | None = None):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.spec = spec
        self.bank = bank if bank is not None else make_prototypes(spec)
        self.layout = uniform_layout(train_cfg.n, spec.text_len, spec.V)
        self.plan = build_grouped_plan(self.layout, train_cfg.variant)
        self.sched = make_zero_snr_schedule(model_cfg.max_T)
        self.params = params if params is not None else init_params(model_cfg, train_cfg.seed)
        self.opt = opt_state if opt_state is not None else AdamState()
        self.global_step = global_step

    def _rng(self, purpose: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, self.global_step, purpose])

    def make_batch(self, data_source: DataSource, conditional: bool) -> BatchSample:
        n, B = self.cfg.n, self.cfg.batch
        batch = data_source(self.spec, self.bank, n, self._rng(0), B)
        noise_rng = self._rng(2)
        t = noise_rng.integers(1, self.sched.T + 1, size=(B, 1)).repeat(n, axis=1)
        eps = torch.from_numpy(noise_rng.standard_normal(tuple(batch.z_V.shape)).astype(np.float32))
        m_c = np.tile(build_conditional_mask(n, conditional).m, (B, 1))
        # context segments are held at t = 0
        t = np.where(m_c == 0, 0, t)
        return BatchSample(batch.text_ids, batch.z_V, eps, t, m_c, batch.styles, batch.prompts)

    def _apply(self, stage: str, batch: BatchSample, task: str) -> dict:
        loss, grads = loss_and_grads(self.params, self.model_cfg, batch, self.layout, self.plan, self.sched)
        gnorm = grad_norm(grads)
        self.params = optimizer_step(self.params, grads, self.opt, self.cfg.lr)
        metrics = {"step": self.global_step, "stage": stage, "task": task, "loss": loss, "grad_norm": gnorm}
        self.global_step += 1
        return metrics

    def pretrain_step(self, data_source: DataSource = sample_pretrain) -> dict:
        batch = self.make_batch(data_source, conditional=False)
        return self._apply("pretrain", batch, "joint")

    def draws_conditional(self) -> bool:
        """Whether the SFT step at the current global step runs the conditional task."""
        return bool(self._rng(1).random() < self.cfg.p)

    def sft_step(self, data_source: DataSource = sample_sft) -> dict:
        conditional = self.draws_conditional()
        batch = self.make_batch(data_source, conditional=conditional)
        return self._apply("sft", batch, "conditional" if conditional else "joint")

    def stage_at(self, step: int) -> str:
        stages = self.cfg.stages
        return stages[min(step // self.cfg.steps, len(stages) - 1)]

    @property
    def total_steps(self) -> int:
        return self.cfg.steps * len(self.cfg.stages)

    def step(self) -> dict:
        stage = self.stage_at(self.global_step)
        return self.pretrain_step() if stage == "pretrain" else self.sft_step()

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"adam_m/{k}": v for k, v in self.opt.m.items()})
        out.update({f"adam_v/{k}": v for k, v in self.opt.v.items()})
        out["meta/step"] = torch.tensor([self.global_step, self.opt.step, self.opt.skipped], dtype=torch.float32)
        out.update(model_meta(self.model_cfg, self.cfg.variant, self.cfg.n, self.spec))
        return out

    def save(self, path: str | Path) -> None:
        save_tensors(path, self.state_tensors())


def model_meta(cfg: ModelConfig, variant: MaskVariant, n: int, spec: SyntheticSpec) -> dict[str, torch.Tensor]:
    return {
        "meta/model_config": torch.tensor(
            [cfg.depth, cfg.dim, cfg.heads, cfg.text_vocab, cfg.token_dim, cfg.max_T, cfg.max_len],
            dtype=torch.float32),
        "meta/task": torch.tensor(
            [list(MaskVariant).index(variant), n, spec.text_len, spec.V], dtype=torch.float32),
    }


@dataclass
class LoadedCheckpoint:
    params: Params
    model_cfg: ModelConfig
    variant: MaskVariant
    n: int
    text_len: int
    V: int
    opt: AdamState
    global_step: int


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    tensors = load_tensors(path)
    try:
        mc = [int(v) for v in tensors["meta/model_config"].tolist()]
        variant_idx, n, text_len, V = (int(v) for v in tensors["meta/task"].tolist())
    except KeyError as exc:
        raise ValueError(f"{path}: missing metadata tensor {exc}") from None
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    opt = AdamState(
        m={k[len("adam_m/"):]: v for k, v in tensors.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: v for k, v in tensors.items() if k.startswith("adam_v/")},
    )
    global_step = 0
    if "meta/step" in tensors:
        global_step, opt.step, opt.skipped = (int(v) for v in tensors["meta/step"].tolist())
    return LoadedCheckpoint(params, ModelConfig(*mc), list(MaskVariant)[variant_idx], n, text_len, V, opt,
                            global_step)


def write_run_info(out_dir: Path, model_cfg: ModelConfig, train_cfg: TrainingConfig, spec: SyntheticSpec) -> None:
    info = {
        "model": asdict(model_cfg),
        "training": {**asdict(train_cfg), "variant": train_cfg.variant.value},
        "synthetic": asdict(spec),
    }
    (out_dir / "run.json").write_text(json.dumps(info, indent=2) + "\n")


def train(model_cfg: ModelConfig, train_cfg: TrainingConfig, spec: SyntheticSpec, out_dir: str | Path,
          checkpoint_every: int = 0, resume: str | Path | None = None, max_steps: int | None = None,
          progress: Callable[[dict], None] | None = None) -> Trainer:
    """Run the configured stage(s), writing ``metrics.csv``, ``checkpoint.bin`` and ``run.json``.

    ``max_steps`` stops early (after that many global steps) without
    changing the stage schedule, which is how interrupted runs are simulated.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.model_cfg != model_cfg:
            raise ValueError(f"{resume}: model config {ck.model_cfg} does not match {model_cfg}")
        trainer = Trainer(model_cfg, train_cfg, spec, ck.params, ck.opt, ck.global_step)
    else:
        trainer = Trainer(model_cfg, train_cfg, spec)
    write_run_info(out_dir, model_cfg, train_cfg, spec)

    metrics_path = out_dir / "metrics.csv"
    append = resume is not None and metrics_path.exists()
    end = trainer.total_steps if max_steps is None else min(max_steps, trainer.total_steps)
    with open(metrics_path, "a" if append else "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_HEADER)
        if not append:
            writer.writeheader()
        while trainer.global_step < end:
            row = trainer.step()
            writer.writerow({**row, "loss": repr(row["loss"]), "grad_norm": repr(row["grad_norm"])})
            if progress is not None:
                progress(row)
            if checkpoint_every and trainer.global_step % checkpoint_every == 0:
                trainer.save(out_dir / "checkpoint.bin")
    trainer.save(out_dir / "checkpoint.bin")
    log.info("finished at step %d, checkpoint in %s", trainer.global_step, out_dir)
    return trainer


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {**r, "step": int(r["step"]), "loss": float(r["loss"]), "grad_norm": float(r["grad_norm"])}
            for r in csv.DictReader(f)
        ]


def run_steps(trainer: Trainer, count: int) -> Iterable[dict]:
    for _ in range(count):
        yield trainer.step()
