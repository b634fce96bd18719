"""Why naive MC fails in high dimension: spread of ||A s||^-n and the ESS of its weights per fixture."""
import math

import numpy as np

from detflow import estimators, operators

rng = np.random.default_rng(0)
print(f"{'fixture':>10} {'n':>3} {'cond':>8} {'ESS/N (MC)':>11} {'rel diff @1e4':>14}")
for name in ("cover3x3", "A1", "A2", "A3", "A4", "A5", "conv16"):
    op = operators.load_fixture(name)
    truth = math.exp(operators.oracle_logabsdet(op))
    rep = estimators.mc_estimate(op, 10_000, rng, truth)
    cond = np.linalg.cond(op.materialize().entries)
    print(f"{name:>10} {op.n:3d} {cond:8.1f} {rep.ess / 1e4:11.4f} {100 * rep.rel_abs_diff:13.1f}%")
