"""Sweep the balance weight alpha and look for collapse onto the one target.

Usage: python3 demos/alpha_sweep.py [iterations] [out_dir]

Each child run trains on the synthetic corpus with a different alpha and
reports the diversity of its translations. A run whose diversity falls
below 5% of the input set's diversity is printed as a COLLAPSE line: the
generator has learned to emit (near) copies of the single target image.
"""
import csv
import json
import sys
from pathlib import Path

from maos.cli import main as cli


def main(iterations: int = 200, out_dir: str = "demo_sweep") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "config.json"
    cfg.write_text(json.dumps({"iterations": iterations, "n_test": 256, "out_dir": str(out)}))
    cli(["sweep", "--config", str(cfg), "--axis", "alpha", "--values", "0.01,0.1,1.0"])
    with open(out / "summary.csv") as f:
        for row in csv.DictReader(f):
            print(f"alpha={row['value']:>5}  fid {float(row['fid']):7.3f}  ssim {float(row['ssim_mean']):.3f}  "
                  f"diversity {float(row['diversity']):.4f} (input {float(row['input_diversity']):.4f})")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 200, sys.argv[2] if len(sys.argv) > 2 else "demo_sweep")
