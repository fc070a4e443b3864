import csv
import io

import pytest
import torch

from m2dt.attention import attention_workload
from m2dt.checkpoint import load_tensors, save_tensors
from m2dt.cli import main, parse_config_file
from m2dt.masks import MaskVariant, build_attention_mask, build_grouped_plan, build_layout, mask_popcount, parse_mask
from m2dt.model import ModelConfig, init_params
from m2dt.training import load_checkpoint, read_metrics

TINY = ["--steps", "3", "--batch", "4", "--depth", "1", "--dim", "16", "--heads", "2", "--T", "20",
        "--video-tokens", "4", "--token-dim", "4", "--checkpoint-every", "0"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_mask_writes_body(tmp_path, capsys):
    path = tmp_path / "m.txt"
    code, _, _ = run(capsys, "mask", "--n", 3, "--text-lens", 2, "--video-lens", 4, "--variant", "V2", "--out", path)
    assert code == 0
    text = path.read_text()
    mask = parse_mask(text)
    assert mask.L == 18 and len(text.strip().splitlines()) == 1 + 18
    assert mask == build_attention_mask(build_layout(3, [2] * 3, [4] * 3), MaskVariant.V2)


def test_mask_to_stdout(capsys):
    code, out, _ = run(capsys, "mask", "--n", 1, "--text-lens", 1, "--video-lens", 1, "--variant", "V1")
    assert code == 0 and parse_mask(out).L == 2


def test_mask_bad_variant_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["mask", "--variant", "V9"])
    assert exc.value.code == 2
    assert "V9" in capsys.readouterr().err


def test_mask_bad_layout_is_usage_error(capsys):
    code, _, err = run(capsys, "mask", "--n", 3, "--text-lens", "1,2", "--video-lens", 4)
    assert code == 2 and err


def test_mask_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "mask", "--out", blocker / "sub" / "m.txt")
    assert code == 1 and err


def test_plan_json(capsys):
    import json

    code, out, _ = run(capsys, "plan", "--n", 2, "--lens", "2,3", "--variant", "V2")
    report = json.loads(out)
    assert code == 0 and len(report["groups"]) == 4
    assert report["workload"] == {"score_entries": 68, "mask_bytes": 0}


def test_verify_default_and_all(capsys):
    assert run(capsys, "verify", "--trials", 3)[0] == 0
    code, out, _ = run(capsys, "verify", "--variant", "all", "--trials", 2)
    assert code == 0 and out.strip().splitlines()[-1].startswith("PASS")


def test_verify_break_plan_fails(capsys):
    code, out, _ = run(capsys, "verify", "--trials", 2, "--break-plan")
    assert code == 1 and "FAIL" in out


def test_verify_single_segment(capsys):
    assert run(capsys, "verify", "--n", 1, "--variant", "all", "--trials", 2)[0] == 0


def _bench(capsys, *argv):
    code, out, _ = run(capsys, "bench", "--repeat", 1, *argv)
    assert code == 0
    return list(csv.DictReader(io.StringIO(out)))


def test_bench_hand_example(capsys):
    rows = _bench(capsys, "--n", 2, "--lens", "2,3", "--variant", "V2,V5")
    assert list(rows[0]) == ["variant", "L", "dense_entries", "grouped_entries", "dense_ms", "grouped_ms",
                             "mask_bytes_saved"]
    v2, v5 = rows
    assert (v2["dense_entries"], v2["grouped_entries"]) == ("100", "68")
    assert v5["dense_entries"] == v5["grouped_entries"] == "100"
    assert v2["mask_bytes_saved"] == "13"


@pytest.mark.parametrize("n,text,video", [(1, "3", "5"), (3, "1,2,3", "4,1,2"), (4, "2", "2")])
def test_bench_entries_match_workload(capsys, n, text, video):
    layout = build_layout(n, [int(v) for v in text.split(",")] * (n if "," not in text else 1),
                          [int(v) for v in video.split(",")] * (n if "," not in video else 1))
    for row in _bench(capsys, "--n", n, "--text-lens", text, "--video-lens", video, "--variant", "all"):
        variant = MaskVariant(row["variant"])
        mask = build_attention_mask(layout, variant)
        assert int(row["grouped_entries"]) == mask_popcount(mask)
        assert int(row["grouped_entries"]) == attention_workload(build_grouped_plan(layout, variant))["score_entries"]
        assert int(row["dense_entries"]) == attention_workload(mask)["score_entries"] == layout.total_len ** 2


def test_bench_repeat_zero(capsys):
    code, _, err = run(capsys, "bench", "--repeat", 0)
    assert code == 2 and "repeat" in err


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# desk\nlr = 0.5\n\nsteps=7\nvariant = V1\n")
    assert parse_config_file(cfg) == {"lr": 0.5, "steps": 7, "variant": "V1"}


@pytest.mark.parametrize("line", ["lr 0.5", "bogus = 1", "steps = many"])
def test_malformed_config_line(tmp_path, capsys, line):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(f"seed = 1\n{line}\n")
    code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "out")
    assert code == 2 and f"{cfg}:2" in err


def test_train_config_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("stage = pretrain\nsteps = 50\nlr = 0.01\n")
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train", "--config", cfg, *TINY, "--out", out)
    assert code == 0
    rows = read_metrics(out / "metrics.csv")
    assert len(rows) == 3 and {r["stage"] for r in rows} == {"pretrain"}
    import json

    info = json.loads((out / "run.json").read_text())
    assert info["training"]["lr"] == 0.01 and info["training"]["steps"] == 3


def test_train_lr_zero_keeps_init(tmp_path, capsys):
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train", *TINY, "--lr", 0, "--seed", 5, "--out", out)
    assert code == 0
    ck = load_checkpoint(out / "checkpoint.bin")
    init = init_params(ck.model_cfg, 5)
    assert ck.model_cfg == ModelConfig(depth=1, dim=16, heads=2, text_vocab=9, token_dim=4, max_T=20, max_len=18)
    assert all(torch.equal(ck.params[k], init[k]) for k in init)


def test_train_resume_matches_uninterrupted(tmp_path, capsys):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run(capsys, "train", *TINY, "--lr", 0.01, "--out", full)[0] == 0
    assert run(capsys, "train", *TINY, "--lr", 0.01, "--stage", "pretrain", "--out", part)[0] == 0
    # a pretrain-only run is the first half of the two-stage run; resuming it under "both" finishes the rest
    assert run(capsys, "train", *TINY, "--lr", 0.01, "--out", part, "--resume", part / "checkpoint.bin")[0] == 0
    a, b = load_tensors(full / "checkpoint.bin"), load_tensors(part / "checkpoint.bin")
    assert a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
    assert [r["loss"] for r in read_metrics(full / "metrics.csv")] == [r["loss"] for r in read_metrics(part / "metrics.csv")]


def test_train_missing_resume(tmp_path, capsys):
    code, _, err = run(capsys, "train", *TINY, "--out", tmp_path / "o", "--resume", tmp_path / "nope.bin")
    assert code == 1 and "nope.bin" in err


@pytest.mark.parametrize("cmd", [["sample"], ["extend", "--prompt", "1"], ["eval"]])
def test_missing_checkpoint(tmp_path, capsys, cmd):
    code, _, err = run(capsys, *cmd, "--checkpoint", tmp_path / "missing.bin")
    assert code == 1 and "missing.bin" in err


def test_corrupt_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE")
    assert run(capsys, "sample", "--checkpoint", bad)[0] == 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main([*map(str, ["train", *TINY, "--lr", 0.01, "--out", out])]) == 0
    return out / "checkpoint.bin"


def test_sample_is_seeded(trained, tmp_path, capsys):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    code, out, _ = run(capsys, "sample", "--checkpoint", trained, "--steps", 3, "--prompts", "0,1,2",
                       "--prompts", "3,4,5", "--seed", 4, "--out", a)
    assert code == 0 and out.count("sample ") == 2
    run(capsys, "sample", "--checkpoint", trained, "--steps", 3, "--prompts", "0,1,2", "--prompts", "3,4,5",
        "--seed", 4, "--out", b)
    ta, tb = load_tensors(a), load_tensors(b)
    assert sorted(ta) == ["segment_0", "segment_1", "segment_2"] and ta["segment_0"].shape == (2, 4, 4)
    assert all(torch.equal(ta[k], tb[k]) for k in ta)
    assert run(capsys, "sample", "--checkpoint", trained, "--prompts", "0,1")[0] == 2


def test_extend_from_file(trained, tmp_path, capsys):
    ctx = tmp_path / "ctx.bin"
    save_tensors(ctx, {"segment_0": torch.ones(1, 4, 4), "segment_1": torch.zeros(1, 4, 4)})
    out = tmp_path / "ext.bin"
    code, _, _ = run(capsys, "extend", "--checkpoint", trained, "--context", ctx, "--context-prompts", "1,2",
                     "--prompt", 3, "--prompt", 4, "--k", 2, "--steps", 2, "--out", out)
    assert code == 0
    segs = load_tensors(out)
    assert len(segs) == 4
    assert torch.equal(segs["segment_0"], torch.ones(1, 4, 4)) and torch.equal(segs["segment_1"], torch.zeros(1, 4, 4))
    assert run(capsys, "extend", "--checkpoint", trained, "--context", ctx, "--prompt", 3)[0] == 2


def test_eval_report(trained, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("M2DT_THREADS", "1")
    report = tmp_path / "eval.csv"
    code, out, _ = run(capsys, "eval", "--checkpoint", trained, "--samples", 4, "--steps", 2, "--leakage",
                       "--out", report)
    assert code == 0
    rows = list(csv.DictReader(report.open()))
    assert list(rows[0]) == ["metric", "value", "n_samples", "seed"]
    metrics = {r["metric"]: float(r["value"]) for r in rows}
    assert metrics["leakage_matches_reachability"] == 1.0
    assert all(0.0 <= v <= 1.0 for v in metrics.values())


def test_bad_thread_env(monkeypatch, capsys):
    monkeypatch.setenv("M2DT_THREADS", "lots")
    assert run(capsys, "verify", "--trials", 1)[0] == 2
