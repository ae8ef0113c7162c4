"""Regenerate the shipped certification threshold (otlab/data/eps_cal.json).

Runs ``otlab calibrate`` on the bundled calibration config and copies the result
into the package data directory.

    python scripts/calibrate.py --threads 4
"""
import argparse
import json
import shutil
import tempfile
from pathlib import Path

from otlab.cli import main as otlab

DATA = Path(__file__).resolve().parents[1] / "src" / "otlab" / "data" / "eps_cal.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--config", default="calibration")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        code = otlab(["calibrate", "--config", args.config, "--out", tmp, "--threads", str(args.threads)])
        if code:
            raise SystemExit(code)
        result = Path(tmp) / "eps_cal.json"
        body = json.loads(result.read_text())
        if not body.get("ok"):
            raise SystemExit("calibration window is empty; data file left unchanged")
        shutil.copyfile(result, DATA)
    print(f"eps_cal = {body['eps_cal']:.6g} written to {DATA}")


if __name__ == "__main__":
    main()
