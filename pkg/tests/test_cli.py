import csv
import io
import os
import subprocess
import sys

import pytest

from robustlab.cli import main

SMALL = ["--n", "12", "--classes", "3"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_analyze_table7(capsys):
    code, out, _ = run(capsys, "analyze", "--presets", "table7", "--resolution", "224")
    assert code == 0
    table = rows(out)
    assert len(table) == 14
    assert table[0]["name"] == "convnext-t" and table[0]["params_m"] == "28.59"


def test_analyze_text(capsys):
    code, out, _ = run(capsys, "analyze", "--presets", "micro-vit,micro-convnext", "--resolution", "32",
                       "--format", "text")
    assert code == 0 and "micro-vit" in out


@pytest.mark.parametrize("argv", [["analyze", "--bogus"], ["frobnicate"], [], ["attack"],
                                  ["attack", "--tm", "l7:1"]])
def test_usage_errors(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert "usage" in err


def test_runtime_error(capsys):
    code, _, err = run(capsys, "analyze", "--presets", "no-such-model")
    assert code == 2 and "error" in err


def test_missing_checkpoint_is_runtime_error(capsys, tmp_path):
    code, _, _ = run(capsys, "attack", "--checkpoint", str(tmp_path / "nope.ckpt"), "--tm", "linf:1/255", *SMALL)
    assert code == 2


def test_attack_zero_radius(capsys):
    code, out, _ = run(capsys, "attack", "--tm", "linf:0", "--tm", "l2:0.5", "--iters", "2", *SMALL)
    assert code == 0
    r = rows(out)
    assert r[0]["robust_acc"] == r[0]["clean_acc"]
    assert float(r[1]["robust_acc"]) <= float(r[1]["clean_acc"])


def test_train_select_adapt_sweep(capsys, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs = 2\nbatch_size = 8\nattack_steps = 1\neval_size = 4\neval_iters = 1\n"
                   "warmup_peak_epoch = 1\n")
    logs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "train", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / name),
                           "--val", "4", "--quiet", "--preset", "micro-convnext", *SMALL)
        assert code == 0
        logs.append(out)
    assert logs[0] == logs[1] and len(rows(logs[0])) == 2
    assert open(tmp_path / "a" / "epoch_002.ckpt", "rb").read() == open(tmp_path / "b" / "epoch_002.ckpt", "rb").read()

    code, out, _ = run(capsys, "select-checkpoint", "--dir", str(tmp_path / "a"), "--tm", "linf:4/255", *SMALL)
    assert code == 0
    sel = rows(out)
    assert len(sel) == 2 and sum(int(r["selected"]) for r in sel) == 1

    ck = str(tmp_path / "a" / "epoch_002.ckpt")
    code, out, _ = run(capsys, "sweep-resolution", "--checkpoint", ck, "--tm", "linf:2/255",
                       "--resolutions", "32,64", "--iters", "1", *SMALL)
    assert code == 0 and out.startswith("resolution,")

    code, out, _ = run(capsys, "finetune-radius", "--checkpoint", ck, "--tm", "linf:8/255", "--epochs", "1",
                       "--batch-size", "12", "--attack-steps", "1", "--eval-size", "4", "--eval-iters", "1",
                       "--warmup-peak-epoch", "0", "--val", "0", "--out", str(tmp_path / "ft"), *SMALL)
    assert code == 0 and len(rows(out)) == 1

    out_path = str(tmp_path / "adapted.ckpt")
    code, out, _ = run(capsys, "adapt", "--checkpoint", ck, "--out", out_path, "--num-classes", "10")
    assert code == 0 and os.path.exists(out_path)


def test_adapt_low_res_needs_convstem(capsys, tmp_path):
    from robustlab.arch import build, preset_spec
    from robustlab.checkpoint import save_checkpoint
    path = str(tmp_path / "p.ckpt")
    save_checkpoint(build(preset_spec("micro-convnext")), path)
    code, _, err = run(capsys, "adapt", "--checkpoint", path, "--out", str(tmp_path / "o.ckpt"), "--low-res")
    assert code == 2 and "convolutional stem" in err


def test_recipe_flag(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--recipe", "cifar100-b", "--epochs", "1", "--attack-steps", "0",
                       "--batch-size", "12", "--eval-size", "2", "--eval-iters", "1", "--val", "2", "--quiet",
                       "--preset", "micro-convnext", "--out", str(tmp_path), *SMALL)
    assert code == 0 and len(rows(out)) == 1
    code, _, _ = run(capsys, "train", "--recipe", "cifar10-c")
    assert code == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "robustlab", "analyze", "--presets", "micro-vit",
                           "--resolution", "32"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("name,params")
    proc = subprocess.run([sys.executable, "-m", "robustlab", "train", "--nope"], capture_output=True, text=True)
    assert proc.returncode == 1
