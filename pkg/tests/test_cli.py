from __future__ import annotations

import json

import numpy as np
import pytest

from depvec.cli import main
from depvec.pretrain import load_checkpoint_with_meta

SRC = "method lowerBound(arr, n, key){ lo = 0; hi = n; L1: if lo >= hi goto L2; lo = lo + 1; goto L1; L2: return lo; }"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-corpora", "--out", str(root / "corp")]) == 0
    lines = (root / "corp" / "pretrain.jsonl").read_text().splitlines()[:6]
    (root / "small.jsonl").write_text("\n".join(lines) + "\n")
    (root / "a.mir").write_text(SRC)
    assert main(["pretrain", "--strategy", "vgae", "--gnn", "gcn", "--corpus", str(root / "small.jsonl"),
                 "--out", str(root / "c.ckpt")]) == 0
    return root


def test_pretrain_writes_loadable_checkpoint(workspace):
    model, meta = load_checkpoint_with_meta(workspace / "c.ckpt")
    assert meta["strategy"] == "vgae"
    assert model.config.gnn == "gcn" and model.config.layers == 5 and model.config.dropout == 0.2


def test_clone_sim_of_identical_files(workspace, capsys):
    a = str(workspace / "a.mir")
    code, out, _ = run(capsys, "clone-sim", a, a, "--checkpoint", str(workspace / "c.ckpt"))
    assert code == 0 and out == "1.000000\n"


def test_embed_prints_600_values(workspace, capsys):
    code, out, _ = run(capsys, "embed", str(workspace / "a.mir"), "--checkpoint", str(workspace / "c.ckpt"))
    assert code == 0
    values = np.array(out.split(), dtype=float)
    assert values.shape == (600,) and np.isfinite(values).all()
    again = run(capsys, "embed", str(workspace / "a.mir"), "--checkpoint", str(workspace / "c.ckpt"))[1]
    assert again == out


def test_unknown_flag_exits_2(capsys):
    code, _, err = run(capsys, "embed", "x.mir", "--checkpoint", "c", "--frobnicate")
    assert code == 2 and "usage:" in err


def test_unknown_command_exits_2(capsys):
    code, _, err = run(capsys, "train-everything")
    assert code == 2 and "usage:" in err


def test_bad_choice_exits_2(workspace, capsys):
    code, _, err = run(capsys, "pretrain", "--gnn", "mlp", "--corpus", "x", "--out", "y")
    assert code == 2 and "usage:" in err


def test_missing_file_exits_1(workspace, capsys):
    code, out, err = run(capsys, "clone-sim", str(workspace / "a.mir"), str(workspace / "nope.mir"),
                         "--checkpoint", str(workspace / "c.ckpt"))
    assert code == 1 and out == "" and "nope.mir" in err


def test_missing_checkpoint_exits_1(workspace, capsys):
    code, _, err = run(capsys, "embed", str(workspace / "a.mir"), "--checkpoint", str(workspace / "none.ckpt"))
    assert code == 1 and "none.ckpt" in err


def test_invalid_program_exits_1(workspace, capsys):
    bad = workspace / "bad.mir"
    bad.write_text("method f(a){ r = q; return r; }")
    code, _, err = run(capsys, "embed", str(bad), "--checkpoint", str(workspace / "c.ckpt"))
    assert code == 1 and "before definition" in err


def test_seed_from_environment(workspace, capsys, monkeypatch):
    monkeypatch.setenv("DEPVEC_SEED", "7")
    code, out, _ = run(capsys, "gen-corpora", "--out", str(workspace / "env"))
    assert code == 0 and json.loads(out)["seed"] == 7
    run(capsys, "gen-corpora", "--out", str(workspace / "flag"), "--seed", "7")
    for name in ("pretrain", "clone"):
        assert (workspace / "env" / f"{name}.jsonl").read_bytes() == (workspace / "flag" / f"{name}.jsonl").read_bytes()


def test_bad_seed_environment(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("DEPVEC_SEED", "seven")
    code, _, err = run(capsys, "gen-corpora", "--out", str(tmp_path))
    assert code == 1 and "DEPVEC_SEED" in err


def test_pretrain_is_byte_identical(workspace, capsys):
    outs = []
    for k in range(2):
        path = workspace / f"rep{k}.ckpt"
        code, out, _ = run(capsys, "pretrain", "--strategy", "context", "--corpus", str(workspace / "small.jsonl"),
                           "--out", str(path), "--seed", "3")
        assert code == 0
        outs.append((out.replace(str(path), "CKPT"), path.read_bytes()))
    assert outs[0] == outs[1]


def test_finetune_outputs_metrics(workspace, capsys):
    args = ["finetune", "--task", "solution_class", "--corpus", str(workspace / "corp" / "probe_struct.jsonl"),
            "--checkpoint", str(workspace / "c.ckpt"), "--epochs", "1", "--out", str(workspace / "m.json")]
    code, out, err = run(capsys, *args)
    assert code == 0
    metrics = json.loads(out)
    assert {"task", "mode", "precision", "recall", "f1", "accuracy", "seed", "checkpoint"} <= set(metrics)
    assert metrics["task"] == "solution_class" and metrics["mode"] == "both"
    assert "precision" in err and "micro" in err
    assert json.loads((workspace / "m.json").read_text()) == metrics
    assert run(capsys, *args)[1] == out


def test_finetune_degenerate_corpus_exits_1(workspace, capsys):
    one = workspace / "one.jsonl"
    one.write_text("".join(json.dumps({"id": f"x{k}", "code": SRC, "label": "same"}) + "\n" for k in range(20)))
    code, _, err = run(capsys, "finetune", "--task", "solution_class", "--corpus", str(one),
                       "--checkpoint", str(workspace / "c.ckpt"), "--epochs", "1")
    assert code == 1 and "degenerate" in err


def test_probe_command(workspace, capsys):
    code, out, _ = run(capsys, "probe", "--corpus", str(workspace / "corp" / "probe_struct.jsonl"),
                       "--checkpoint", str(workspace / "c.ckpt"), "--feature", "dependence")
    rep = json.loads(out)
    assert code == 0 and rep["width"] == 300 and 0.0 <= rep["accuracy"] <= 1.0


def test_selfcheck_passes(capsys):
    code, out, _ = run(capsys, "selfcheck")
    assert code == 0, out
    assert "checks passed" in out
