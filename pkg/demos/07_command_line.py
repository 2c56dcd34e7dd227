"""The ``formlink`` command, driven end to end from Python.

Each step is what you would type in a shell, e.g.
``formlink gen --seed 7 --num-docs 30 --out train.json``.
"""

import tempfile
from pathlib import Path

from formlink.cli import main


def run(*argv):
    print("$ formlink " + " ".join(str(a) for a in argv))
    code = main([str(a) for a in argv])
    assert code == 0, code


with tempfile.TemporaryDirectory() as tmp:
    d = Path(tmp)
    run("gen", "--seed", 7, "--num-docs", 30, "--out", d / "train.json")
    run("gen", "--seed", 8, "--num-docs", 6, "--split", "test", "--out", d / "test.json")
    run("validate", "--data", d / "train.json")
    run("train", "--data", d / "train.json", "--val", d / "test.json", "--out", d / "run", "--epochs", 40, "--lr", "1e-3")
    run("eval", "--ckpt", d / "run" / "best.ckpt", "--data", d / "test.json", "--report", d / "report.json")
    run("predict", "--ckpt", d / "run" / "best.ckpt", "--input", d / "test.json", "--out", d / "pred.json")
    run("viz", "--pred", d / "pred.json", "--data", d / "test.json", "--out", d / "forms.svg")
    run("viz", "--pred", d / "pred.json", "--data", d / "test.json", "--out", d / "forms.dot", "--format", "dot")
    print((d / "forms.dot").read_text(encoding="utf-8").splitlines()[2])
