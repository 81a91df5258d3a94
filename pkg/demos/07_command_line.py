"""
The command-line workflow, driven from Python
=============================================

gen -> train -> eval -> report, the same calls the ``hierseg`` console
script makes.  Everything lands in a temporary directory.
"""

import tempfile
from pathlib import Path

from hierseg.cli import main

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    small = ["--set", "depth=2", "--set", "base_width=4"]

    main(["gen", "--seed", "1", "--count", "2", "--out", str(tmp / "data")])
    main(["train", "--manifest", str(tmp / "data" / "manifest.tsv"), "--out", str(tmp / "run"),
          "--arch", "res-unet", "--loss", "hdice", "--iterations", "5", "--lr", "1e-3", *small])
    main(["eval", "--manifest", str(tmp / "data" / "manifest.tsv"),
          "--checkpoint", str(tmp / "run" / "checkpoint.hnck"), "--out", str(tmp / "eval")])
    main(["report", "--manifest", str(tmp / "data" / "manifest.tsv"),
          "--checkpoint", str(tmp / "run" / "checkpoint.hnck"),
          "--loss-csv", str(tmp / "run" / "loss.csv"), "--slices", "1", "--out", str(tmp / "report")])

    # every command leaves its resolved configuration next to its outputs
    print((tmp / "run" / "run_config.txt").read_text().splitlines()[:4])
    print(sorted(p.name for p in (tmp / "report").iterdir()))

    # bad input is an error message and exit status 2, not a traceback
    print("exit status:", main(["gen", "--out", str(tmp / "x"), "--set", "lr=7"]))
