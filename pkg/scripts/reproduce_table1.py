"""Dense-fixture comparison (A1..A5): train one flow per fixture, then MC vs VDE over the sample grid.

    python3 scripts/reproduce_table1.py --profile desk --trials 3
"""
import argparse
import sys

from detflow import cli

p = argparse.ArgumentParser()
p.add_argument("--profile", default="desk", choices=["desk", "paper-dense"])
p.add_argument("--trials", type=int, default=1)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--out-dir", default="runs/table1")
p.add_argument("--workers", type=int, default=1)
a = p.parse_args()

sys.exit(cli.main(["table", "table1", "--train-first", "--profile", a.profile, "--trials", str(a.trials),
                   "--seed", str(a.seed), "--out-dir", a.out_dir, "--workers", str(a.workers), "-v"]))
