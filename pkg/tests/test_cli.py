import csv
import subprocess
import sys

import numpy as np
import pytest

from handfold import autodiff as ad
from handfold.cli import main, parse_thresholds, read_config, resolve_train_settings, build_parser, UsageError
from handfold.dataset import load_manifest
from handfold.preprocess import foreground_mask, preprocess_depth, read_depth
from handfold.synth import SYNTH_INTRINSICS


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A 4-frame synthetic set and a checkpoint trained on it for a few epochs."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "4", "--out", str(root / "data"), "--seed", "5"]) == 0
    manifest = root / "data" / "manifest.txt"
    assert main(["train", str(manifest), "--out", str(root / "run"), "--epochs", "3", "--k", "1",
                 "--batch", "4", "--no-augment", "--lr", "3e-3", "--deterministic"]) == 0
    return root, manifest, root / "run" / "last.hfld"


# ---------------------------------------------------------------- usage errors


def test_missing_manifest_exit_2(tmp_path, capsys):
    code, _, err = run(["train", tmp_path / "nope.txt", "--out", tmp_path / "o"], capsys)
    assert code == 2 and "error" in err


def test_train_without_data_source_exit_2(tmp_path, capsys):
    assert run(["train", "--out", tmp_path / "o"], capsys)[0] == 2


def test_unknown_subcommand_exit_2(capsys):
    assert run(["frobnicate"], capsys)[0] == 2


def test_corrupt_depth_magic_exit_2(trained, tmp_path, capsys):
    _, _, ckpt = trained
    bad = tmp_path / "bad.dpth"
    bad.write_bytes(b"NOPE" + bytes(64))
    code, _, err = run(["infer", ckpt, bad], capsys)
    assert code == 2 and "error" in err


def test_corrupt_checkpoint_exit_2(trained, tmp_path, capsys):
    _, manifest, _ = trained
    bad = tmp_path / "bad.hfld"
    bad.write_bytes(b"\x00" * 5)
    assert run(["eval", bad, manifest], capsys)[0] == 2


# ---------------------------------------------------------------- config file


def test_config_file_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nepochs = 12\nlr=0.01  # trailing\naugment = off\nlocal-level = input\n")
    assert read_config(p) == {"epochs": 12, "lr": 0.01, "augment": False, "local_level": "input"}


@pytest.mark.parametrize("text", ["bogus = 1\n", "epochs 12\n", "epochs = many\n", "augment = maybe\n"])
def test_config_file_errors(tmp_path, text):
    p = tmp_path / "c.cfg"
    p.write_text(text)
    with pytest.raises(UsageError):
        read_config(p)


def test_config_precedence_flag_over_file_over_default(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("epochs = 12\nlr = 0.01\n")
    args = build_parser().parse_args(["train", "--synthetic", "2", "--config", str(p), "--epochs", "3"])
    s = resolve_train_settings(args)
    assert s["epochs"] == 3 and s["lr"] == 0.01 and s["batch"] == 32


def test_bad_config_key_exit_2(tmp_path, capsys):
    p = tmp_path / "c.cfg"
    p.write_text("bogus = 1\n")
    assert run(["train", "--synthetic", "2", "--config", p, "--out", tmp_path / "o"], capsys)[0] == 2


def test_thresholds_parse():
    assert parse_thresholds("0:80:2") == [float(x) for x in range(0, 81, 2)]
    assert parse_thresholds("1,5,10") == [1.0, 5.0, 10.0]
    with pytest.raises(UsageError):
        parse_thresholds("0:10:0")


# ---------------------------------------------------------------- params


def test_params_table(capsys):
    code, out, _ = run(["params"], capsys)
    rows = [line.split() for line in out.strip().splitlines()[1:]]
    assert code == 0 and [int(r[1]) for r in rows] == [352707, 849606, 1346505, 1843404]


def test_params_single_k(capsys):
    code, out, _ = run(["params", "--k", "2"], capsys)
    assert code == 0 and out.strip().splitlines()[1].split()[:2] == ["2", "1346505"]


# ---------------------------------------------------------------- train / eval / infer


def test_train_writes_log_and_checkpoint(trained):
    root, _, ckpt = trained
    lines = (root / "run" / "train.log").read_text().splitlines()
    assert len(lines) == 3 and ckpt.is_file()


def test_eval_report_identical_twice_and_read_only(trained, tmp_path, capsys):
    _, manifest, ckpt = trained
    before = ckpt.read_bytes()
    mtime = ckpt.stat().st_mtime_ns
    c1, out1, _ = run(["eval", ckpt, manifest, "--csv", tmp_path / "a.csv"], capsys)
    c2, out2, _ = run(["eval", ckpt, manifest, "--csv", tmp_path / "b.csv"], capsys)
    assert c1 == c2 == 0
    strip = lambda s: [x for x in s.splitlines() if not x.startswith("curve")]  # noqa: E731
    assert strip(out1) == strip(out2)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert ckpt.read_bytes() == before and ckpt.stat().st_mtime_ns == mtime
    assert "frames 4" in out1 and "mean_error_mm" in out1
    assert sum(line.startswith("joint ") for line in out1.splitlines()) == 16


def test_eval_curve_has_41_threshold_rows(trained, tmp_path, capsys):
    _, manifest, ckpt = trained
    assert run(["eval", ckpt, manifest, "--thresholds", "0:80:2", "--csv", tmp_path / "c.csv"], capsys)[0] == 0
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["threshold_mm", "success_rate"] and len(rows) - 1 == 41
    rates = [float(r[1]) for r in rows[1:]]
    assert rates == sorted(rates)


def _infer_joints(out):
    lines = out.strip().splitlines()
    assert len(lines) == 16
    return np.array([[float(v) for v in line.split()[1:]] for line in lines])


def test_infer_within_expanded_hand_box_and_repeatable(trained, capsys):
    _, manifest, ckpt = trained
    depth_path = load_manifest(manifest).path(0)
    c1, out1, _ = run(["infer", ckpt, depth_path], capsys)
    c2, out2, _ = run(["infer", ckpt, depth_path], capsys)
    assert c1 == c2 == 0 and out1 == out2
    joints = _infer_joints(out1)
    assert np.isfinite(joints).all()
    depth = read_depth(depth_path)
    frame = preprocess_depth(depth, SYNTH_INTRINSICS, foreground_mask(depth), 1024, 30, 0)
    # the normalized box is [-0.5, 0.5]^3; 20% larger is [-0.6, 0.6]^3
    assert np.abs(frame.transform.normalize(joints)).max() <= 0.6


def test_infer_with_explicit_intrinsics(trained, capsys):
    _, manifest, ckpt = trained
    m = load_manifest(manifest)
    i = m.intrinsics
    code, out, _ = run(["infer", ckpt, m.path(1), "--intrinsics", i.fx, i.fy, i.cx, i.cy], capsys)
    assert code == 0 and np.isfinite(_infer_joints(out)).all()


def test_resume_continues_epochs(trained, tmp_path, capsys):
    root, manifest, ckpt = trained
    code, out, _ = run(["train", manifest, "--out", tmp_path / "r", "--resume", ckpt, "--epochs", "4", "--k", "1",
                        "--batch", "4", "--no-augment", "--lr", "3e-3", "--deterministic"], capsys)
    assert code == 0
    log_lines = (tmp_path / "r" / "train.log").read_text().splitlines()
    assert len(log_lines) == 1 and log_lines[0].startswith("epoch 3 ")


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_ops_pass_and_list_each_op_once(capsys):
    code, out, _ = run(["gradcheck", "--ops-only"], capsys)
    names = [line.split()[0] for line in out.splitlines() if "rel_err=" in line]
    assert code == 0 and "ALL PASS" in out
    assert names == list(ad.OPS)


def test_gradcheck_perturbed_op_reported(capsys):
    code, out, _ = run(["gradcheck", "--ops-only", "--perturb", "linear"], capsys)
    failed = {line.split()[0] for line in out.splitlines() if "rel_err=" in line and line.endswith("FAIL")}
    assert code == 1 and "linear" in failed and "FAILED" in out


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "handfold.cli", "params", "--k", "0"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.splitlines()[1].split()[1] == "352707"
