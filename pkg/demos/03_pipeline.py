"""A small end-to-end run of the command line: data, training, evaluation.

The budgets here are tiny so the script finishes in under a minute; the
numbers are therefore far below those of a default run.

Run:  python3 demos/03_pipeline.py [work_dir]
"""
import sys
import tempfile
from pathlib import Path

from grfp.cli import main

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="grfp-demo-"))
data, ck, ev = work / "data", work / "ck", work / "eval"


def run(*argv):
    print(f"\n$ grfp {' '.join(argv)}")
    code = main(list(argv))
    if code:
        sys.exit(code)


run("generate", "--out", str(data), "--train", "6", "--val", "3", "--test", "1")
run("train", "--dataset", str(data), "--out", str(ck), "--pretrain-epochs", "20",
    "--steps", "40", "--val-every", "20", "--flow-noise", "0.5")
run("eval", "--dataset", str(data), "--checkpoint", str(ck), "--out", str(ev),
    "--flow-noise", "0.5", "--backward")
print(f"\ntables and overlays written under {ev}")
