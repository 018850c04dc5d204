"""The `handfold` command line, end to end.

Each step renders, trains, evaluates or infers through the same entry point a
user would type in a shell. The training run is deliberately tiny.
"""
import tempfile
from pathlib import Path

from handfold.cli import main


def run(*argv):
    print("$ handfold", " ".join(map(str, argv)))
    code = main([str(a) for a in argv])
    print(f"(exit {code})\n")
    return code


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    run("params", "--k", "2")
    run("synth", 4, "--out", tmp / "data", "--seed", 3)
    (tmp / "train.cfg").write_text("# key = value; command-line flags win\nepochs = 2\nbatch = 4\naugment = off\nk = 1\n")
    run("train", tmp / "data" / "manifest.txt", "--config", tmp / "train.cfg", "--out", tmp / "run", "--deterministic")
    run("eval", tmp / "run" / "last.hfld", tmp / "data" / "manifest.txt", "--csv", tmp / "curve.csv")
    run("infer", tmp / "run" / "last.hfld", tmp / "data" / "frame_00000.dpth")
    run("train", tmp / "missing.txt", "--out", tmp / "x")  # usage error -> exit 2
