import logging

import numpy as np
import pytest

from sdit import cli, rwkv
from sdit.data_io import load_checkpoint, read_pnm


def _train(tmp_path, name, *extra):
    out = tmp_path / name
    code = cli.main(["train", "--toy", "bars", "--size", "8", "--steps", "20", "--seed", "7",
                     "--out", str(out), "--ckpt-every", "10", *extra])
    return code, out


def test_train_writes_run_dir(tmp_path, capsys):
    code, out = _train(tmp_path, "run")
    assert code == 0
    rows = (out / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,loss" and len(rows) == 21
    assert (out / "final.ckpt").exists()
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["step_000010.ckpt", "step_000020.ckpt"]
    echo = (out / "config.txt").read_text()
    assert echo in capsys.readouterr().out
    assert "seed = 7" in echo and "hidden_dim = 32" in echo


def test_rerun_from_echoed_config_is_identical(tmp_path):
    _, a = _train(tmp_path, "a")
    assert cli.main(["train", "--config", str(a / "config.txt"), "--out", str(tmp_path / "b")]) == 0
    assert (a / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    assert (a / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_resume_continues_identically(tmp_path):
    _, full = _train(tmp_path, "full")
    _, half = _train(tmp_path, "half", "--steps", "10")
    code = cli.main(["train", "--toy", "bars", "--size", "8", "--steps", "20", "--seed", "7",
                     "--out", str(half), "--ckpt-every", "10",
                     "--resume", str(half / "checkpoints" / "step_000010.ckpt")])
    assert code == 0
    assert (full / "loss.csv").read_bytes() == (half / "loss.csv").read_bytes()
    assert (full / "final.ckpt").read_bytes() == (half / "final.ckpt").read_bytes()


def test_ablation_flag(tmp_path):
    _, base = _train(tmp_path, "base")
    code, abl = _train(tmp_path, "abl", "--no-recon-module")
    assert code == 0
    assert (base / "loss.csv").read_bytes() != (abl / "loss.csv").read_bytes()
    params = load_checkpoint(abl / "final.ckpt").params
    recon = [k for k in params if k.endswith("recon_d") or k.endswith("recon_n")]
    assert recon and all(not params[k].any() for k in recon)
    assert "use_recon = false" in (abl / "config.txt").read_text()


def test_precedence(tmp_path):
    conf = tmp_path / "c.txt"
    conf.write_text("hidden_dim = 16\nlr = 0.5  # comment\n")
    code = cli.main(["train", "--toy", "bars", "--steps", "1", "--out", str(tmp_path / "r"),
                     "--config", str(conf), "--set", "lr=0.25", "--spike-steps", "1"])
    assert code == 0
    echo = (tmp_path / "r" / "config.txt").read_text()
    assert "hidden_dim = 16" in echo and "lr = 0.25" in echo and "spike_steps = 1" in echo


@pytest.mark.parametrize("argv, needle", [
    (["train", "--steps", "1"], "--toy"),
    (["train", "--idx-images", "/nonexistent/x.idx"], "x.idx"),
    (["train", "--toy", "bars", "--set", "bogus=1"], "bogus"),
    (["train", "--toy", "bars", "--set", "hidden_dim=abc"], "abc"),
    (["train", "--toy", "bars", "--size", "7"], "divisible"),
    (["sample", "--ckpt", "/nonexistent.ckpt"], "nonexistent"),
    (["sample"], "--ckpt"),
    (["verify", "--only", "nope"], "nope"),
])
def test_usage_errors_exit_2(argv, needle, tmp_path, capsys):
    assert cli.main(argv + (["--out", str(tmp_path / "o")] if argv[0] == "train" else [])) == 2
    assert needle in capsys.readouterr().err


def test_numeric_failure_exit_3(tmp_path, monkeypatch, caplog):
    real = cli.loss_step
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        return float("nan") if len(calls) == 4 else real(*args, **kwargs)

    monkeypatch.setattr(cli, "loss_step", flaky)
    with caplog.at_level(logging.ERROR, logger="sdit"):
        code, out = _train(tmp_path, "nan")
    assert code == 3
    assert "step 4" in caplog.text
    assert len((out / "loss.csv").read_text().splitlines()) == 4


def test_sample(tmp_path):
    _, run = _train(tmp_path, "run")
    ckpt = str(run / "final.ckpt")
    assert cli.main(["sample", "--ckpt", ckpt, "--n", "16", "--seed", "1"]) == 0
    grid = read_pnm(run / "samples" / "samples_seed1.pgm")
    assert grid.shape == (4 * 8 + 3 * 2, 4 * 8 + 3 * 2, 1)
    dump = np.load(run / "samples" / "samples_seed1.npy")
    assert dump.shape == (16, 1, 8, 8) and np.all(np.isfinite(dump))
    first = (run / "samples" / "samples_seed1.pgm").read_bytes()
    assert cli.main(["sample", "--ckpt", ckpt, "--n", "16", "--seed", "1", "--out", str(tmp_path / "s2")]) == 0
    assert (tmp_path / "s2" / "samples_seed1.pgm").read_bytes() == first
    assert cli.main(["sample", "--ckpt", ckpt, "--n", "4", "--stride", "5", "--cols", "4",
                     "--out", str(tmp_path / "s3")]) == 0
    assert read_pnm(tmp_path / "s3" / "samples_seed0.pgm").shape == (8, 4 * 8 + 3 * 2, 1)
    assert cli.main(["sample", "--ckpt", ckpt, "--n", "0"]) == 2
    assert cli.main(["sample", "--ckpt", ckpt, "--stride", "7"]) == 2


def test_verify_all_pass(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


def test_verify_only_filters(capsys):
    assert cli.main(["verify", "--only", "wkv"]) == 0
    rows = [l for l in capsys.readouterr().out.splitlines() if l.startswith(("PASS", "FAIL"))]
    assert rows and all(l.split()[1] == "wkv" for l in rows)
    assert cli.main(["verify", "--only", "lif,schedule"]) == 0


def test_verify_catches_sign_error_in_wkv_backward(monkeypatch, capsys):
    real = rwkv._wkv_backward

    def flipped(*args):
        gk, gv, gw, gu = real(*args)
        return gk, gv, -gw, gu

    monkeypatch.setattr(rwkv, "_wkv_backward", flipped)
    assert cli.main(["verify", "--only", "wkv"]) == 1
    assert "FAIL  wkv      grad wkv" in capsys.readouterr().out


def test_count(capsys):
    assert cli.main(["count", "--preset", "mnist"]) == 0
    out = capsys.readouterr().out
    assert "11,698,958" in out and "11.67 M" in out and "1.32 G" in out
    assert cli.main(["count", "--csv", "--set", "num_input_blocks=0", "--set", "num_output_blocks=0",
                     "--size", "4", "--hidden-dim", "8"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1] == "desk,1278,256,7184,2,14624"
