import json
import subprocess
import sys

import pytest

from dst.checkpoint import Checkpoint
from dst.cli import main

TINY = ["--set", "model_dim=8", "--set", "ffn_dim=16", "--set", "layers=2",
        "--set", "decision_layers=1", "--set", "batch_size=4", "--set", "warmup=2"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    data = d / "copy"
    assert main(["gen-data", "--task", "copy", "--vocab", "6", "--min-len", "3", "--max-len", "5",
                 "--count", "12", "--out", str(data), "--seed", "3"]) == 0
    files = dict(src=f"{data}.src", tgt=f"{data}.tgt", align=f"{data}.align", vocab=f"{data}.vocab")
    pre, fine = d / "pre.ckpt", d / "fine.ckpt"
    assert main(["pretrain", "--src", files["src"], "--tgt", files["tgt"], "--vocab", files["vocab"],
                 "--steps", "3", "--out", str(pre), "--log", str(d / "pre.jsonl"), *TINY]) == 0
    assert main(["finetune", "--src", files["src"], "--tgt", files["tgt"], "--vocab", files["vocab"],
                 "--init", str(pre), "--steps", "3", "--out", str(fine), "--set", "T=2"]) == 0
    return d, files, pre, fine


def test_gen_data_files(workdir):
    d, files, _, _ = workdir
    src = open(files["src"]).read().splitlines()
    assert len(src) == 12 and src == open(files["tgt"]).read().splitlines()
    assert open(files["align"]).readline().split()[0] == "1-1"


def test_training_verbs_write_checkpoints_and_logs(workdir):
    d, _, pre, fine = workdir
    assert Checkpoint.load(pre).stage == "pretrain"
    ft = Checkpoint.load(fine)
    assert ft.stage == "finetune" and ft.config.model_dim == 8 and ft.config.T == 2.0
    recs = [json.loads(l) for l in open(d / "pre.jsonl")]
    assert [r["update"] for r in recs] == [0, 1, 2]


def test_finetune_needs_init(workdir):
    _, files, _, _ = workdir
    with pytest.raises(SystemExit):
        main(["finetune", "--src", files["src"], "--tgt", files["tgt"], "--vocab", files["vocab"],
              "--out", "x.ckpt"])


def test_unknown_setting_rejected(workdir):
    _, files, _, _ = workdir
    with pytest.raises(SystemExit):
        main(["pretrain", "--src", files["src"], "--tgt", files["tgt"], "--vocab", files["vocab"],
              "--out", "x.ckpt", "--set", "nonsense=1"])


def test_config_file_precedence(workdir, tmp_path):
    _, files, _, _ = workdir
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# toy\nmodel_dim = 16\nffn_dim = 8\nlayers = 1\ndecision_layers = 1\n")
    out = tmp_path / "p.ckpt"
    assert main(["pretrain", "--src", files["src"], "--tgt", files["tgt"], "--vocab", files["vocab"],
                 "--steps", "1", "--out", str(out), "--config", str(cfg), "--set", "model_dim=4"]) == 0
    c = Checkpoint.load(out).config
    assert (c.model_dim, c.ffn_dim, c.layers) == (4, 8, 1)


def test_translate_and_trace(workdir, tmp_path):
    _, files, _, fine = workdir
    out, trace = tmp_path / "hyp.txt", tmp_path / "trace.jsonl"
    assert main(["translate", "--ckpt", str(fine), "--vocab", files["vocab"], "--input", files["src"],
                 "--output", str(out), "--trace", str(trace), "--delta", "0.5"]) == 0
    assert len(out.read_text().splitlines()) == 12
    recs = [json.loads(l) for l in trace.read_text().splitlines()]
    assert len(recs) == 12 and all("g" in r for r in recs)


def test_evaluate_verb(workdir, tmp_path, capsys):
    _, files, _, fine = workdir
    report = tmp_path / "eval.json"
    assert main(["evaluate", "--ckpt", str(fine), "--vocab", files["vocab"], "--src", files["src"],
                 "--tgt", files["tgt"], "--align", files["align"], "--deltas", "0.3,0.7",
                 "--limit", "4", "--out", str(report)]) == 0
    printed = capsys.readouterr().out
    assert "delta=0.3" in printed and "delta=0.7" in printed
    data = json.loads(report.read_text())
    assert [r["delta_infer"] for r in data] == [0.3, 0.7]
    assert set(data[0]) == {"delta_infer", "AL", "BLEU", "HR", "sentences"}


def test_grad_check_verb(capsys):
    assert main(["grad-check", "--layers", "1", "--dim", "4", "--length", "3"]) == 0
    assert "ok" in capsys.readouterr().out


def test_dump_attention_verb(workdir, tmp_path):
    _, files, _, fine = workdir
    out = tmp_path / "att.jsonl"
    assert main(["dump-attention", "--ckpt", str(fine), "--vocab", files["vocab"],
                 "--source", "w1 w2 w3", "--target", "w1 w2", "--out", str(out)]) == 0
    recs = [json.loads(l) for l in out.read_text().splitlines()]
    assert [(r["layer"], r["name"]) for r in recs[:3]] == [(0, "p"), (0, "alpha_s"), (0, "alpha_t")]
    assert recs[0]["shape"] == [3, 4]


def test_stream_verb_reads_stdin(workdir, tmp_path):
    _, files, _, fine = workdir
    trace = tmp_path / "s.jsonl"
    proc = subprocess.run([sys.executable, "-m", "dst.cli", "stream", "--ckpt", str(fine),
                           "--vocab", files["vocab"], "--trace", str(trace)],
                          input="w1 w2 w3\n\nw4 w5\n", capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0, proc.stderr
    assert len(proc.stdout.splitlines()) == 2
    recs = [json.loads(l) for l in trace.read_text().splitlines()]
    finals = [r for r in recs if "g" in r]
    # J counts tokens consumed, at most the line plus </s>
    assert len(finals) == 2 and 1 <= finals[0]["J"] <= 4 and 1 <= finals[1]["J"] <= 3
    assert [r["sentence"] for r in finals] == [0, 1]
    assert recs[0]["action"] == "READ"
