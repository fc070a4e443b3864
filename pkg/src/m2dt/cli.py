"""Command-line entry point.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .attention import AttentionWeights, attention_workload, grouped_attention, masked_attention_dense
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .masks import (
    Group,
    GroupedPlan,
    MaskVariant,
    build_attention_mask,
    build_grouped_plan,
    build_layout,
    format_layout,
    mask_popcount,
    serialize_mask,
)
from .model import ModelConfig
from .sampling import Pipeline, SamplerConfig
from .synthetic import SyntheticSpec, decode_segments, leakage_probe, make_prototypes, probe_params, sample_sft
from .training import TrainingConfig, load_checkpoint, train

log = logging.getLogger("m2dt")

BENCH_HEADER = ["variant", "L", "dense_entries", "grouped_entries", "dense_ms", "grouped_ms", "mask_bytes_saved"]
VERIFY_TOL = 1e-5

# desk-scale recipe; the TrainingConfig dataclass keeps the large-model values
DESK = {
    "stage": "both", "p": 0.5, "lr": 2e-3, "batch": 16, "steps": 1500, "n": 3, "variant": "V2", "seed": 0,
    "depth": 4, "dim": 64, "heads": 4, "T": 100,
    "styles": 4, "prompts": 8, "video_tokens": 16, "token_dim": 8, "sigma": 0.05, "data_seed": 0, "text_len": 2,
    "out": "runs/desk", "resume": None, "checkpoint_every": 500,
}
INT_KEYS = {"batch", "steps", "n", "seed", "depth", "dim", "heads", "T", "styles", "prompts", "video_tokens",
            "token_dim", "data_seed", "text_len", "checkpoint_every"}
FLOAT_KEYS = {"p", "lr", "sigma"}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _variant(text: str) -> MaskVariant:
    try:
        return MaskVariant.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _variants(text: str) -> list[MaskVariant]:
    if text.lower() == "all":
        return list(MaskVariant)
    return [_variant(v) for v in text.split(",")]


def _layout_from(args):
    n = args.n
    if getattr(args, "lens", None):
        if len(args.lens) != 2:
            raise UsageError("--lens takes TEXT,VIDEO")
        text, video = [args.lens[0]] * n, [args.lens[1]] * n
    else:
        text, video = args.text_lens, args.video_lens
    text = text * n if len(text) == 1 else text
    video = video * n if len(video) == 1 else video
    try:
        return build_layout(n, text, video)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _add_layout_flags(p, default_n=3, lens=True):
    p.add_argument("--n", type=int, default=default_n, help="number of scenes")
    p.add_argument("--text-lens", type=_int_list, default=[2], help="tokens per text group (one value or n)")
    p.add_argument("--video-lens", type=_int_list, default=[4], help="tokens per video group (one value or n)")
    if lens:
        p.add_argument("--lens", type=_int_list, default=None, help="shorthand TEXT,VIDEO for every segment")


def _open_out(path: str | None):
    if path in (None, "-"):
        return sys.stdout
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline="")


def cmd_mask(args) -> int:
    layout = _layout_from(args)
    mask = build_attention_mask(layout, args.variant)
    out = _open_out(args.out)
    try:
        out.write(serialize_mask(mask))
    finally:
        if out is not sys.stdout:
            out.close()
    log.info("%s %s popcount=%d", format_layout(layout), args.variant.value, mask_popcount(mask))
    return 0


def cmd_plan(args) -> int:
    layout = _layout_from(args)
    plan = build_grouped_plan(layout, args.variant)
    groups = [
        {"kind": "text" if i < layout.n else "video", "segment": i % layout.n + 1,
         "query": list(g.query), "kv": [list(s) for s in g.kv]}
        for i, g in enumerate(plan.groups)
    ]
    print(json.dumps({"layout": format_layout(layout), "variant": args.variant.value, "L": plan.L,
                      "groups": groups, "workload": attention_workload(plan)}, indent=2))
    return 0


def _broken(plan: GroupedPlan) -> GroupedPlan:
    """Drop the last key span of the last group that has more than one key token."""
    groups = list(plan.groups)
    for i in reversed(range(len(groups))):
        g = groups[i]
        if g.kv_len > 1:
            kv = list(g.kv)
            a, b = kv[-1]
            kv[-1] = (a, b - 1)
            groups[i] = Group(g.query, tuple(s for s in kv if s[1] > s[0]))
            break
    return GroupedPlan(plan.L, tuple(groups))


def cmd_verify(args) -> int:
    layout = _layout_from(args)
    gen = torch.Generator().manual_seed(args.seed)
    worst = 0.0
    for variant in args.variant:
        variant_worst = 0.0
        mask = build_attention_mask(layout, variant)
        plan = build_grouped_plan(layout, variant)
        if args.break_plan:
            plan = _broken(plan)
        for _ in range(args.trials):
            x = torch.randn(layout.total_len, args.dim, generator=gen)
            w = AttentionWeights.random(args.dim, args.heads, gen)
            diff = (grouped_attention(x, w, plan) - masked_attention_dense(x, w, mask)).abs().max().item()
            variant_worst = max(variant_worst, diff)
        worst = max(worst, variant_worst)
        print(f"{variant.value} {format_layout(layout)} trials={args.trials} max_abs_diff={variant_worst:.3e}")
    ok = worst <= VERIFY_TOL
    print(f"{'PASS' if ok else 'FAIL'} max_abs_diff={worst:.3e} tol={VERIFY_TOL:g}")
    return 0 if ok else 1


def _time_ms(fn, repeat: int) -> float:
    fn()
    start = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - start) * 1000.0 / repeat


def bench_rows(layout, variants, repeat: int, dim: int = 64, heads: int = 4, seed: int = 0) -> list[dict]:
    if repeat < 1:
        raise UsageError("--repeat must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(layout.total_len, dim, generator=gen)
    w = AttentionWeights.random(dim, heads, gen)
    rows = []
    for variant in variants:
        mask = build_attention_mask(layout, variant)
        plan = build_grouped_plan(layout, variant)
        dense_w, grouped_w = attention_workload(mask), attention_workload(plan)
        dense_mask = torch.as_tensor(mask.dense())
        with torch.no_grad():
            dense_ms = _time_ms(lambda: masked_attention_dense(x, w, dense_mask), repeat)
            grouped_ms = _time_ms(lambda: grouped_attention(x, w, plan), repeat)
        rows.append({
            "variant": variant.value, "L": layout.total_len,
            "dense_entries": dense_w["score_entries"], "grouped_entries": grouped_w["score_entries"],
            "dense_ms": f"{dense_ms:.4f}", "grouped_ms": f"{grouped_ms:.4f}",
            "mask_bytes_saved": dense_w["mask_bytes"] - grouped_w["mask_bytes"],
        })
    return rows


def cmd_bench(args) -> int:
    layout = _layout_from(args)
    rows = bench_rows(layout, args.variant, args.repeat, args.dim, args.heads, args.seed)
    out = _open_out(args.out)
    try:
        writer = csv.DictWriter(out, fieldnames=BENCH_HEADER)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def parse_config_file(path: str) -> dict:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or key not in DESK:
            raise UsageError(f"{path}:{lineno}: malformed config line {raw!r}")
        try:
            out[key] = int(value) if key in INT_KEYS else float(value) if key in FLOAT_KEYS else value
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return out


def _train_settings(args) -> dict:
    settings = dict(DESK)
    if args.config:
        settings.update(parse_config_file(args.config))
    for key in DESK:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def _configs(s: dict):
    spec = SyntheticSpec(S=s["styles"], C=s["prompts"], V=s["video_tokens"], d=s["token_dim"], sigma=s["sigma"],
                         seed=s["data_seed"], text_len=s["text_len"])
    model = ModelConfig(depth=s["depth"], dim=s["dim"], heads=s["heads"], text_vocab=spec.text_vocab,
                        token_dim=s["token_dim"], max_T=s["T"], max_len=s["n"] * (s["text_len"] + s["video_tokens"]))
    training = TrainingConfig(stage=s["stage"], p=s["p"], lr=s["lr"], batch=s["batch"], steps=s["steps"], n=s["n"],
                              variant=s["variant"], seed=s["seed"])
    return model, training, spec


def cmd_train(args) -> int:
    settings = _train_settings(args)
    try:
        model, training, spec = _configs(settings)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if settings["resume"] and not Path(settings["resume"]).exists():
        raise FileNotFoundError(f"checkpoint not found: {settings['resume']}")

    def progress(row):
        if row["step"] % 100 == 0:
            log.info("step %d %s/%s loss=%.5f", row["step"], row["stage"], row["task"], row["loss"])

    trainer = train(model, training, spec, settings["out"], checkpoint_every=settings["checkpoint_every"],
                    resume=settings["resume"], progress=progress)
    print(f"trained {trainer.global_step} steps; checkpoint {Path(settings['out']) / 'checkpoint.bin'}")
    return 0


def _spec_for(checkpoint: str, args) -> SyntheticSpec:
    run = Path(checkpoint).parent / "run.json"
    spec = SyntheticSpec(**json.loads(run.read_text())["synthetic"]) if run.exists() else SyntheticSpec()
    overrides = {k: v for k, v in (("sigma", args.sigma), ("seed", args.data_seed)) if v is not None}
    return replace(spec, **overrides)


def _pipeline(args):
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    ck = load_checkpoint(args.checkpoint)
    spec = _spec_for(args.checkpoint, args)
    if (spec.text_len, spec.V, spec.d) != (ck.text_len, ck.V, ck.model_cfg.token_dim):
        raise CheckpointError("synthetic task settings do not match the checkpoint")
    return Pipeline.build(ck.params, ck.model_cfg, spec, ck.n, ck.variant), spec, ck


def _write_segments(path: str, segments: torch.Tensor) -> None:
    """``segments`` is ``(B, k, V, d)``; written as ``segment_<i>`` tensors of shape ``(B, V, d)``."""
    save_tensors(path, {f"segment_{i}": segments[:, i] for i in range(segments.shape[1])})


def _read_segments(path: str) -> torch.Tensor:
    tensors = load_tensors(path)
    names = sorted((k for k in tensors if k.startswith("segment_")), key=lambda k: int(k.split("_")[1]))
    if not names:
        raise CheckpointError(f"{path}: no segment_<i> tensors")
    segs = [tensors[k] if tensors[k].dim() == 3 else tensors[k][None] for k in names]
    return torch.stack(segs, 1)


def _report_decoded(segments: torch.Tensor, spec: SyntheticSpec) -> None:
    styles, prompts = decode_segments(make_prototypes(spec), segments)
    for b in range(len(styles)):
        pairs = " ".join(f"({s},{c})" for s, c in zip(styles[b], prompts[b]))
        print(f"sample {b}: decoded (style,prompt) {pairs}")


def cmd_sample(args) -> int:
    pipe, spec, ck = _pipeline(args)
    prompts = np.array(args.prompts if args.prompts else [list(range(pipe.n))])
    if prompts.shape[1] != pipe.n:
        raise UsageError(f"each --prompts needs {pipe.n} values")
    segments = pipe.generate_fixed(prompts, SamplerConfig(args.steps, args.seed))
    _write_segments(args.out, segments)
    _report_decoded(segments, spec)
    return 0


def cmd_extend(args) -> int:
    pipe, spec, ck = _pipeline(args)
    n = pipe.n
    if args.context:
        context = _read_segments(args.context)[:, -(n - 1):]
        if not args.context_prompts or len(args.context_prompts) < n - 1:
            raise UsageError(f"--context-prompts needs the {n - 1} prompts of the context segments")
        context_prompts = np.array([args.context_prompts[-(n - 1):]])
    else:
        data = sample_sft(spec, make_prototypes(spec), n, np.random.default_rng(args.seed), 1)
        context = data.z_V.reshape(1, n, spec.V, spec.d)[:, : n - 1]
        context_prompts = data.prompts[:, : n - 1]
        print(f"context drawn from style {int(data.styles[0, 0])}, prompts {context_prompts[0].tolist()}")
    context_prompts = np.broadcast_to(context_prompts, (context.shape[0], n - 1))
    new = pipe.extend_many(context, context_prompts, args.prompt, args.k, SamplerConfig(args.steps, args.seed))
    segments = torch.cat([context, new], 1)
    _write_segments(args.out, segments)
    _report_decoded(segments, spec)
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate, write_report

    pipe, spec, ck = _pipeline(args)
    bank = make_prototypes(spec)
    metrics = evaluate(pipe, bank, args.samples, args.seed, args.steps)
    if args.leakage:
        depths = tuple(d for d in (1, 2) if d <= pipe.cfg.depth)
        report = leakage_probe(probe_params(pipe.cfg, args.seed), pipe.cfg, pipe.layout, ck.variant, depths=depths,
                               seed=args.seed)
        metrics["leakage_matches_reachability"] = float(report["match"])
    write_report(args.out, metrics, args.samples, args.seed)
    for k, v in metrics.items():
        print(f"{k},{v:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m2dt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="write a symmetric attention mask")
    _add_layout_flags(p)
    p.add_argument("--variant", type=_variant, default=MaskVariant.V2)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("plan", help="print the grouped-attention plan")
    _add_layout_flags(p)
    p.add_argument("--variant", type=_variant, default=MaskVariant.V2)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("verify", help="check grouped attention against the dense masked reference")
    _add_layout_flags(p)
    p.add_argument("--variant", type=_variants, default=[MaskVariant.V2], help="variant list or 'all'")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--break-plan", action="store_true", help="corrupt the plan (self-test; must fail)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="dense vs grouped attention workload and timing")
    _add_layout_flags(p)
    p.add_argument("--variant", type=_variants, default=list(MaskVariant), help="variant list or 'all'")
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="two-stage training on the synthetic task")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--stage", choices=["pretrain", "sft", "both"])
    for key in ("p", "lr", "sigma"):
        p.add_argument(f"--{key}", type=float)
    for key in sorted(INT_KEYS):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)
    p.add_argument("--variant", type=lambda s: _variant(s).value)
    p.add_argument("--out")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("sample", cmd_sample, "generate n scenes jointly"),
                                 ("extend", cmd_extend, "extend scenes auto-regressively"),
                                 ("eval", cmd_eval, "consistency metrics on the synthetic task")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--steps", type=int, default=50, help="sampler steps")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--sigma", type=float, default=None)
        p.add_argument("--data-seed", type=int, default=None)
        p.set_defaults(func=func)
        if name == "sample":
            p.add_argument("--prompts", type=_int_list, action="append", help="n prompt ids; repeat for a batch")
            p.add_argument("--out", default="samples.bin")
        elif name == "extend":
            p.add_argument("--context", help="segment file from sample/extend; default draws a coherent context")
            p.add_argument("--context-prompts", type=_int_list)
            p.add_argument("--prompt", type=int, action="append", required=True, help="new prompt; repeatable")
            p.add_argument("--k", type=int, default=1)
            p.add_argument("--out", default="extended.bin")
        else:
            p.add_argument("--samples", type=int, default=200)
            p.add_argument("--out", default="eval.csv")
            p.add_argument("--leakage", action="store_true", help="also run the attention leakage probe")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("M2DT_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"m2dt: error: M2DT_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"m2dt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError, ValueError, FloatingPointError) as exc:
        print(f"m2dt {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
