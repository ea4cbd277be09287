"""Regenerate tests/data/golden_run.json by driving the CLI end to end.

Run from the repository root:  python scripts/make_golden_run.py
Only rerun this when a change to the reconstruction is intended to move the numbers.
"""

import json
import sys
import tempfile
from pathlib import Path

from qsm_amp.cli import main

DATA = Path(__file__).resolve().parents[1] / "tests" / "data"
SIMULATE_FLAGS = ["--sigma", "0.01", "--outlier-frac", "0.05", "--outlier-sigma", "0.2", "--seed", "0"]


def golden_pipeline(work: Path) -> dict:
    steps = [
        ["phantom", str(DATA / "golden_phantom.json"), "--out", str(work / "ph")],
        ["simulate", str(work / "ph" / "chi.qvol"), str(DATA / "golden_protocol.json"),
         "--mask", str(work / "ph" / "mask.qvol"), "--out", str(work / "echoes"), *SIMULATE_FLAGS],
        ["recon", str(work / "echoes"), str(DATA / "golden_config.json"), "--method", "amp-pe",
         "--mask", str(work / "ph" / "mask.qvol"), "--out", str(work / "rec")],
        ["evaluate", str(work / "rec" / "chi.qvol"), str(work / "ph" / "chi.qvol"),
         "--mask", str(work / "ph" / "mask.qvol"), "--out", str(work / "metrics.json")],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            raise RuntimeError(f"qsm {argv[0]} exited with {code}")
    metrics = json.loads((work / "metrics.json").read_text())
    report = json.loads((work / "rec" / "report.json").read_text())
    return {"metrics": metrics, "outer_iterations": report["outer_iterations"],
            "simulate_flags": SIMULATE_FLAGS}


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        doc = golden_pipeline(Path(tmp))
    (DATA / "golden_run.json").write_text(json.dumps(doc, indent=2) + "\n")
    json.dump(doc, sys.stdout, indent=2)
    print()
