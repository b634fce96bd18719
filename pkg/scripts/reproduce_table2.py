"""Convolution experiment: 16x16 matrix of a 3x3 filter on a 4x4 image.

Writes results.csv, summary.txt and the two figure CSVs (estimate and
relative difference against N) under --out-dir.

    python3 scripts/reproduce_table2.py --profile desk
"""
import argparse
import sys

from detflow import cli

p = argparse.ArgumentParser()
p.add_argument("--profile", default="desk", choices=["desk", "paper-conv"])
p.add_argument("--trials", type=int, default=1)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--out-dir", default="runs/table2")
p.add_argument("--workers", type=int, default=1)
a = p.parse_args()

sys.exit(cli.main(["table", "table2", "--train-first", "--profile", a.profile, "--trials", str(a.trials),
                   "--seed", str(a.seed), "--out-dir", a.out_dir, "--workers", str(a.workers), "-v"]))
