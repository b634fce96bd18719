"""Train on one fixture with periodic held-out evaluation and print how the KL bound closes in on log|A|.

    python3 scripts/bound_trace.py --fixture cover3x3 --iterations 2000 --eval-every 200
"""
import argparse

from detflow import cli, operators, train

p = argparse.ArgumentParser()
p.add_argument("--fixture", default="cover3x3", choices=operators.FIXTURE_NAMES)
p.add_argument("--iterations", type=int, default=2000)
p.add_argument("--batch-size", type=int, default=256)
p.add_argument("--eval-every", type=int, default=200)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--out", default=None, help="optional CSV of the eval records")
a = p.parse_args()

op = operators.load_fixture(a.fixture)
cfg = train.TrainConfig(flow=cli.default_flow(a.fixture, op.n), iterations=a.iterations,
                        batch_size=a.batch_size, seed=a.seed, eval_every=a.eval_every)
_, trace = train.train(cfg, op)
truth = operators.oracle_logabsdet(op)
print(f"log|A| = {truth:.4f}")
print(f"{'iter':>6} {'KL bound':>9} {'gap':>7} {'VDE rel diff':>13} {'ESS':>7}")
for e in trace.evals:
    print(f"{e['iteration']:6d} {e['kl_bound']:9.4f} {e['kl_bound'] - truth:7.4f} "
          f"{100 * e['vde_rel_abs_diff']:12.2f}% {e['ess']:7.0f}")
if a.out:
    trace.write_eval_csv(a.out)
