"""
Joint rest-shape and material inversion through the command line.

Writes a benchmark to a temporary directory, inverts it, validates on the
held-out poses and prints the recovered moduli and validation table. Takes a
minute or two.
"""

import json
import pathlib
import tempfile

from staticinv.cli import main

with tempfile.TemporaryDirectory() as tmp:
    d = pathlib.Path(tmp)
    main(["--output", str(d), "synth"])
    main(["--config", str(d / "run.cfg"), "--output", str(d / "run"), "invert"])
    main(["--config", str(d / "run.cfg"), "--output", str(d / "run"), "validate"])
    truth = json.loads((d / "ground_truth.json").read_text())["cluster_E"]
    found = json.loads((d / "run" / "moduli.json").read_text())["cluster_E"]
    for t, f in zip(truth, found):
        print(f"true {t:9.0f} Pa  recovered {f:11.1f} Pa  error {abs(f / t - 1):.2e}")
    print((d / "run" / "validation.csv").read_text())
