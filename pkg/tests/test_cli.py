import json
import os
import subprocess
import sys

import numpy as np
import pytest

from lspstereo.cli import cli_main
from lspstereo.data import sample_paths
from lspstereo.fileio import read_pfm

SMALL = ["--height", "16", "--width", "32", "--dmax", "8"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    assert cli_main(["gen", "--count", "6", "--seed", "4", "--out", str(data), *SMALL]) == 0
    cfg = root / "run.cfg"
    cfg.write_text("# tiny run\ndmax = 8\niters = 3\nbatch = 2\ncrop_h = 8\nholdout = 2\nlog_every = 2\nrefine = dsr\n")
    assert cli_main(["train", "--config", str(cfg), "--refine", "csr", "--data", str(data), "--out", str(run)]) == 0
    return root, data, run, cfg


def test_gen_layout(tmp_path):
    out = tmp_path / "d"
    assert cli_main(["gen", "--count", "2", "--seed", "7", "--out", str(out), *SMALL]) == 0
    names = sorted(os.listdir(out))
    assert names == [f"00000{i}.{ext}" for i in range(2) for ext in ("disp.pfm", "left.ppm", "mask.pgm", "right.ppm")]


def test_gen_is_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert cli_main(["gen", "--count", "1", "--seed", "3", "--out", str(tmp_path / sub), *SMALL]) == 0
    for key, path in sample_paths(tmp_path / "a", 0).items():
        assert open(path, "rb").read() == open(sample_paths(tmp_path / "b", 0)[key], "rb").read()


def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli_main(["gen", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli_main([]) == 1
    assert cli_main(["gen"]) == 1
    assert cli_main(["train", "--lsp", "zz"]) == 1
    assert cli_main(["gen", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    assert cli_main(["gen", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert cli_main(["gradcheck", "--op", "nope"]) == 1
    assert cli_main(["--help"]) == 0


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert cli_main(["eval", "--data", str(tmp_path / "missing"), "--ckpt", str(tmp_path / "x.lacm")]) == 2
    junk = tmp_path / "junk.lacm"
    junk.write_bytes(b"nope")
    assert cli_main(["eval", "--data", str(tmp_path), "--ckpt", str(junk)]) == 2
    assert "error" in capsys.readouterr().err


def test_gradcheck_subset(capsys):
    assert cli_main(["gradcheck", "--op", "relu", "--op", "reduce_mean", "--seeds", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and all(line.startswith("PASS") for line in lines)


def test_train_writes_outputs_and_flags_override_config(trained):
    _, _, run, _ = trained
    assert {"model.lacm", "config.txt", "train.log"} <= set(os.listdir(run))
    side = (run / "config.txt").read_text()
    assert "refine = csr" in side and "dmax = 8" in side


def test_eval_matches_training_log(trained, capsys):
    _, data, run, _ = trained
    capsys.readouterr()
    report = run / "report.json"
    assert cli_main(["eval", "--data", str(data), "--out", str(run), "--holdout", "2", "--report", str(report)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert json.loads(report.read_text()) == printed
    final = (run / "train.log").read_text().splitlines()[-1].split()
    logged = float(final[final.index("heldout_epe") + 1])
    assert abs(printed["epe"] - logged) <= 1e-6
    assert printed["n_valid"] > 0 and len(printed["per_sample"]) == 2


def test_eval_output_is_deterministic(trained, capsys):
    _, data, run, _ = trained
    outs = []
    for _ in range(2):
        capsys.readouterr()
        assert cli_main(["eval", "--data", str(data), "--out", str(run), "--holdout", "2"]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]


def test_infer_writes_disparity(trained, tmp_path):
    _, data, run, _ = trained
    paths = sample_paths(data, 0)
    out = tmp_path / "d.pfm"
    assert cli_main(["infer", "--ckpt", str(run / "model.lacm"), "--left", paths["left"], "--right", paths["right"],
                     "--out", str(out)]) == 0
    disp = read_pfm(out)
    assert disp.shape == (16, 32)
    assert np.all(np.isfinite(disp)) and disp.min() >= 0 and disp.max() <= 7
    assert cli_main(["infer", "--ckpt", str(run / "model.lacm"), "--left", paths["mask"], "--right", paths["right"],
                     "--out", str(out)]) == 2


def test_lsp_dump(trained, tmp_path):
    _, data, run, _ = trained
    img = sample_paths(data, 1)["left"]
    out = tmp_path / "lsp.pfm"
    assert cli_main(["lsp-dump", "--image", img, "--dilation", "2", "--channel", "3", "--out", str(out)]) == 0
    raw = read_pfm(out)
    assert raw.shape == (16, 32) and raw.min() >= -1 and raw.max() <= 1
    assert cli_main(["lsp-dump", "--image", img, "--ckpt", str(run / "model.lacm"), "--out", str(out)]) == 0
    assert read_pfm(out).shape == (16, 32)
    assert cli_main(["lsp-dump", "--image", img, "--channel", "8", "--out", str(out)]) == 1


def test_refine_viz(trained, tmp_path):
    _, data, run, _ = trained
    out = tmp_path / "viz.txt"
    assert cli_main(["refine-viz", "--ckpt", str(run / "model.lacm"), "--data", str(data), "--sample", "1",
                     "--pixel", "5,9", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# sample 1 pixel y=5 x=9")
    assert len(lines) == 2 + 2
    assert cli_main(["refine-viz", "--ckpt", str(run / "model.lacm"), "--data", str(data), "--pixel", "99,0",
                     "--out", str(out)]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lspstereo", "gen", "--count", "1", "--out", str(tmp_path / "d"), *SMALL],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "lspstereo", "train", "--unknown-flag"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr
