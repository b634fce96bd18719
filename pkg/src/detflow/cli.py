"""Command-line front end: ``detflow {estimate,train,table}``.

Experiment config (``--spec file.json``); every key is optional and command-line
flags take precedence::

    {"name": "a1-desk",
     "fixture": "A1",                  # or "operator_file": "op.json"
     "flow": {...FlowSpec.to_dict()...},
     "profile": "desk",                # desk | paper-dense | paper-conv
     "samples": [100, 1000, 10000, 100000],
     "trials": 1,
     "out_dir": "runs/a1",
     "seed": 0}

Exit codes: 0 ok, 1 bad configuration, 2 missing artifact, 3 invalid or singular operator,
4 training diverged.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import estimators, operators, train as training
from .diffgraph import save_checkpoint
from .flows import FlowSpec, SphericalFlow, cover_spec, dense_spec

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_OPERATOR, EXIT_DIVERGED = 0, 1, 2, 3, 4
DEFAULT_GRID = (100, 1000, 10_000, 100_000)
TABLE1_FIXTURES = ("A1", "A2", "A3", "A4", "A5")
RESULT_FIELDS = ["fixture", "method", "N", "seed", "trial", "det_estimate", "log_det_estimate",
                 "rel_abs_diff", "ess", "kl_bound"]

log = logging.getLogger("detflow")


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


@dataclass
class ExperimentSpec:
    name: str = "run"
    fixture: str | None = None
    operator_file: str | None = None
    flow: FlowSpec | None = None
    profile: str = "desk"
    samples: tuple[int, ...] = DEFAULT_GRID
    trials: int = 1
    out_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        self.samples = tuple(int(n) for n in self.samples)
        if not self.samples or any(n < 1 for n in self.samples):
            raise ValueError("sample grid must be non-empty and positive")
        if list(self.samples) != sorted(set(self.samples)):
            raise ValueError(f"sample grid must be strictly ascending, got {self.samples}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.profile not in training.PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        if d.get("flow") is not None:
            d["flow"] = FlowSpec.from_dict(d["flow"])
        return cls(**d)


def parse_count(text: str) -> int:
    """``"1e5"`` -> 100000; rejects non-integral values."""
    val = float(text)
    if not val.is_integer() or val < 1:
        raise argparse.ArgumentTypeError(f"not a positive integer sample count: {text}")
    return int(val)


def parse_grid(text: str) -> tuple[int, ...]:
    return tuple(parse_count(t) for t in text.split(",") if t.strip())


def _operator_kind(op) -> str:
    return "conv" if isinstance(op, operators.ConvOperator) else "dense"


def default_flow(fixture: str | None, n: int) -> FlowSpec:
    return cover_spec(n) if fixture == "cover3x3" else dense_spec(n)


def load_operator(spec: ExperimentSpec):
    try:
        if spec.operator_file:
            path = Path(spec.operator_file)
            if not path.exists():
                raise CliError(f"operator file not found: {path}", EXIT_MISSING)
            return operators.load_operator_file(path)
        if spec.fixture:
            return operators.load_fixture(spec.fixture)
    except (operators.OperatorError, ValueError, KeyError) as err:
        raise CliError(f"invalid operator: {err}", EXIT_OPERATOR) from err
    raise CliError("give --fixture or --operator-file", EXIT_OPERATOR)


def oracle_det(op) -> float:
    try:
        return math.exp(operators.oracle_logabsdet(op))
    except operators.OperatorError as err:
        raise CliError(f"operator is singular or invalid: {err}", EXIT_OPERATOR) from err


def _cell_rng(seed: int, trial: int, n_samples: int) -> np.random.Generator:
    # shared by both methods, so an untrained flow reproduces MC exactly
    return np.random.default_rng([seed, trial, n_samples])


def run_estimates(op, label: str, methods, grid, seed: int, trials: int,
                  flow: SphericalFlow | None = None, workers: int = 1) -> list[dict]:
    truth = oracle_det(op)
    rows = []
    for n_samples in grid:
        for method in methods:
            for trial in range(trials):
                rng = _cell_rng(seed, trial, n_samples)
                try:
                    if method == "mc":
                        rep = estimators.mc_estimate(op, n_samples, rng, truth, seed, workers)
                    else:
                        rep = estimators.vde_estimate(op, flow, n_samples, rng, truth, seed, workers)
                except estimators.EstimationError as err:
                    raise CliError(str(err), EXIT_OPERATOR) from err
                rows.append({"fixture": label, "method": method, "N": n_samples, "seed": seed,
                             "trial": trial, "det_estimate": rep.det_estimate,
                             "log_det_estimate": rep.log_det_estimate,
                             "rel_abs_diff": rep.rel_abs_diff, "ess": rep.ess,
                             "kl_bound": rep.kl_bound})
    return rows


def write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _mean_std(vals) -> tuple[float, float]:
    vals = np.asarray(vals, dtype=float)
    return float(vals.mean()), (float(vals.std(ddof=1)) if len(vals) > 1 else float("nan"))


def _pct(mean: float, std: float) -> str:
    if math.isnan(std):
        return f"{100 * mean:.1f} %"
    return f"{100 * mean:.1f} ± {100 * std:.1f} %"


def format_rel_table(rows: list[dict], grid, methods) -> str:
    """table1 layout: one row per method, one column per N, mean ± std of rel_abs_diff."""
    head = ["Nr. of samples"] + [f"{n:.0e}".replace("+0", "") for n in grid]
    lines = [head]
    for method in methods:
        cells = [method.upper()]
        for n in grid:
            vals = [r["rel_abs_diff"] for r in rows if r["method"] == method and r["N"] == n]
            cells.append(_pct(*_mean_std(vals)))
        lines.append(cells)
    widths = [max(len(line[i]) for line in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths)) for line in lines)


def format_det_table(rows: list[dict], grid, truth: float) -> str:
    """table2 layout: det, log det and relative difference per method and N."""
    out = [f"true det {truth:.4f}   true log det {math.log(truth):.4f}"]
    for method in ("vde", "mc"):
        for n in grid:
            sel = [r for r in rows if r["method"] == method and r["N"] == n]
            if not sel:
                continue
            det = _mean_std([r["det_estimate"] for r in sel])[0]
            ld = _mean_std([r["log_det_estimate"] for r in sel])[0]
            rel = _mean_std([r["rel_abs_diff"] for r in sel])
            line = (f"{method.upper():4s} N={n:<7d} det {det:12.4f}  log det {ld:8.4f}  "
                    f"rel diff {_pct(*rel)}")
            if method == "vde":
                line += f"  KL bound {_mean_std([r['kl_bound'] for r in sel])[0]:.4f}"
            out.append(line)
    return "\n".join(out)


def _checkpoint_flow(path: Path, n: int) -> SphericalFlow:
    if not path.exists():
        raise CliError(f"checkpoint not found: {path} (train first, or pass --train-first)",
                       EXIT_MISSING)
    flow, _ = training.load_flow(path)
    if flow.n != n:
        raise CliError(f"checkpoint is for n={flow.n}, operator has n={n}", EXIT_OPERATOR)
    return flow


def run_training(op, spec: ExperimentSpec, out_dir: Path, workers: int = 1,
                 **overrides) -> tuple[Path, training.TrainTrace]:
    out_dir.mkdir(parents=True, exist_ok=True)
    ck = out_dir / "checkpoint.json"
    flow = spec.flow or default_flow(spec.fixture, op.n)
    if flow.n != op.n:
        raise CliError(f"flow spec has n={flow.n}, operator has n={op.n}", EXIT_OPERATOR)
    cfg = training.profile_config(spec.profile, op.n, spec.seed, flow, kind=_operator_kind(op),
                                  checkpoint_path=str(ck), workers=workers, **overrides)
    oracle_det(op)
    try:
        params, trace = training.train(cfg, op, log_every=max(1, cfg.iterations // 20))
    except training.TrainingDiverged as err:
        err.trace.write_csv(out_dir / "trace.csv")
        raise CliError(f"training diverged: {err}", EXIT_DIVERGED) from err
    save_checkpoint(ck, params, cfg.iterations, None, flow_spec=flow.to_dict(),
                             train_config=cfg.to_dict())
    trace.write_csv(out_dir / "trace.csv")
    trace.write_eval_csv(out_dir / "eval.csv")
    return ck, trace


# --- commands -------------------------------------------------------------------

def cmd_estimate(args, spec: ExperimentSpec) -> int:
    op = load_operator(spec)
    methods = ["mc", "vde"] if args.method == "both" else [args.method]
    flow = None
    if "vde" in methods:
        if not args.checkpoint:
            raise CliError("VDE needs --checkpoint", EXIT_MISSING)
        flow = _checkpoint_flow(Path(args.checkpoint), op.n)
    label = spec.fixture or Path(spec.operator_file).stem
    rows = run_estimates(op, label, methods, spec.samples, spec.seed, spec.trials, flow, args.workers)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "results.csv", rows)
    text = format_rel_table(rows, spec.samples, methods)
    (out / "summary.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_train(args, spec: ExperimentSpec) -> int:
    op = load_operator(spec)
    overrides = {k: v for k, v in (("iterations", args.iterations), ("batch_size", args.batch_size),
                                   ("eval_every", args.eval_every)) if v is not None}
    ck, trace = run_training(op, spec, Path(spec.out_dir), args.workers, **overrides)
    text = (f"objective: initial {trace.objective[0]:.5f}  final {trace.objective[-1]:.5f}  "
            f"oracle log|det| {math.log(oracle_det(op)):.5f}\ncheckpoint: {ck}")
    (Path(spec.out_dir) / "summary.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def _table_flow(fixture: str, op, spec: ExperimentSpec, args, root: Path) -> SphericalFlow:
    ck_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else root / "checkpoints" / fixture
    ck = ck_dir / "checkpoint.json"
    if not ck.exists() and args.train_first:
        log.info("training %s (%s profile)", fixture, spec.profile)
        run_training(op, replace(spec, fixture=fixture, flow=None), ck_dir, args.workers)
    return _checkpoint_flow(ck, op.n)


def cmd_table(args, spec: ExperimentSpec) -> int:
    root = Path(spec.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.which == "table1":
        fixtures = [spec.fixture] if spec.fixture else list(TABLE1_FIXTURES)
        if args.checkpoint_dir and len(fixtures) > 1:
            raise CliError("--checkpoint-dir needs a single --fixture", EXIT_MISSING)
        for name in fixtures:
            op = operators.load_fixture(name)
            flow = _table_flow(name, op, spec, args, root)
            rows += run_estimates(op, name, ["vde", "mc"], spec.samples, spec.seed, spec.trials,
                                  flow, args.workers)
        text = format_rel_table(rows, spec.samples, ["vde", "mc"])
    else:
        name = "conv16"
        op = operators.load_fixture(name)
        flow = _table_flow(name, op, spec, args, root)
        rows = run_estimates(op, name, ["vde", "mc"], spec.samples, spec.seed, spec.trials,
                             flow, args.workers)
        text = format_det_table(rows, spec.samples, oracle_det(op))
        write_figure_csvs(root, rows, oracle_det(op))
    write_rows(root / "results.csv", rows)
    (root / "summary.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def write_figure_csvs(root: Path, rows: list[dict], truth: float) -> None:
    """Estimate vs N and rel-diff vs N per method; both are meant for log-scaled axes."""
    for fname, key, note in (("figure_estimate.csv", "det_estimate", "log-log: det estimate vs N"),
                             ("figure_reldiff.csv", "rel_abs_diff", "log-log: rel abs diff vs N")):
        with open(root / fname, "w", newline="") as fh:
            fh.write(f"# {note}; true det {truth!r}\n")
            w = csv.writer(fh)
            w.writerow(["method", "N", "mean", "std"])
            for method in ("vde", "mc"):
                for n in sorted({r["N"] for r in rows}):
                    vals = [r[key] for r in rows if r["method"] == method and r["N"] == n]
                    m, s = _mean_std(vals)
                    w.writerow([method, n, repr(m), repr(s)])


# --- argument handling --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", help="experiment config JSON")
    common.add_argument("--fixture", choices=operators.FIXTURE_NAMES)
    common.add_argument("--operator-file")
    common.add_argument("--flow-spec", help="FlowSpec JSON file")
    common.add_argument("--profile", choices=sorted(training.PROFILES))
    common.add_argument("--samples", type=parse_grid, help="count or comma-separated grid, e.g. 1e2,1e3")
    common.add_argument("--trials", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="detflow", description="Spherical determinant estimators.")
    sub = p.add_subparsers(dest="command", required=True)
    est = sub.add_parser("estimate", parents=[common], help="MC and/or VDE estimates over a sample grid")
    est.add_argument("--method", choices=["mc", "vde", "both"], default="mc")
    est.add_argument("--checkpoint")
    tr = sub.add_parser("train", parents=[common], help="fit a flow proposal")
    tr.add_argument("--iterations", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--eval-every", type=int)
    tb = sub.add_parser("table", parents=[common], help="reproduce the estimator comparison tables")
    tb.add_argument("which", choices=["table1", "table2"])
    tb.add_argument("--train-first", action="store_true")
    tb.add_argument("--checkpoint-dir")
    return p


def resolve_spec(args) -> ExperimentSpec:
    base: dict = {}
    if args.spec:
        path = Path(args.spec)
        if not path.exists():
            raise CliError(f"spec file not found: {path}", EXIT_MISSING)
        base = json.loads(path.read_text())
    for key, val in (("fixture", args.fixture), ("operator_file", args.operator_file),
                     ("profile", args.profile), ("samples", args.samples),
                     ("trials", args.trials), ("out_dir", args.out_dir), ("seed", args.seed)):
        if val is not None:
            base[key] = val
    if args.fixture and not args.operator_file:
        base.pop("operator_file", None)
    if args.flow_spec:
        base["flow"] = json.loads(Path(args.flow_spec).read_text())
    if os.environ.get("DETFLOW_SEED"):
        base["seed"] = int(os.environ["DETFLOW_SEED"])
    if args.command == "estimate" and "samples" not in base:
        base["samples"] = (100_000,)
    base.setdefault("out_dir", "runs")
    return ExperimentSpec.from_dict(base)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        spec = resolve_spec(args)
        return {"estimate": cmd_estimate, "train": cmd_train, "table": cmd_table}[args.command](args, spec)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except ValueError as err:
        # bad configuration values
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
