"""Spherical Monte Carlo and variational (importance-sampled) determinant estimators.

Both estimate ``1/|A| = E_U[||A s||^{-n}]``; all weight arithmetic is done in
log-space and reduced with log-sum-exp in a fixed order, so results depend
only on the seed (not on chunking or worker count).
"""
from __future__ import annotations

import inspect
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
from scipy.special import logsumexp

from . import sphere
from .flows import MAX_RESAMPLE, SphericalFlow
from .operators import LinearOperator

CHUNK = 16384


class EstimationError(FloatingPointError):
    pass


@dataclass
class EstimateReport:
    method: str
    n_samples: int
    inv_det_estimate: float
    det_estimate: float
    log_det_estimate: float
    weight_mean: float
    weight_var: float
    ess: float
    std_error: float
    seed: int | None = None
    true_det: float | None = None
    rel_abs_diff: float | None = None
    kl_bound: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def log_norm(y: np.ndarray) -> np.ndarray:
    """``log ||y||`` along the last axis, scaled by the max entry first (two-pass)."""
    scale = np.max(np.abs(y), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = y / scale[..., None]
        return np.log(scale) + 0.5 * np.log(np.sum(scaled * scaled, axis=-1))


def log_integrand(op: LinearOperator, s: np.ndarray) -> np.ndarray:
    """``-n log ||A s||`` for each row of ``s``."""
    out = -op.n * log_norm(op.matvec(s))
    bad = ~np.isfinite(out)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise EstimationError(f"||A s||^-n overflows at sample {i} (s={s[i].tolist()}); "
                              "operator is (near-)singular")
    return out


def _map_chunks(fn, n_total: int, workers: int):
    bounds = [(i, min(i + CHUNK, n_total)) for i in range(0, n_total, CHUNK)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda b: fn(*b), bounds))
    else:
        parts = [fn(*b) for b in bounds]
    return parts


def _report(method: str, log_w: np.ndarray, seed=None, truth: float | None = None) -> EstimateReport:
    n_samples = len(log_w)
    log_inv = float(logsumexp(log_w) - math.log(n_samples))
    if not math.isfinite(log_inv):
        raise EstimationError("non-finite importance weight")
    # weights relative to the mean, so the statistics never overflow
    rel = np.exp(log_w - log_inv)
    var_rel = float(np.var(rel, ddof=1)) if n_samples > 1 else 0.0
    inv_det = math.exp(log_inv)
    ess = float(np.sum(rel) ** 2 / np.sum(rel * rel))
    rep = EstimateReport(
        method=method,
        n_samples=n_samples,
        inv_det_estimate=inv_det,
        det_estimate=math.exp(-log_inv),
        log_det_estimate=0.0 - log_inv,
        weight_mean=inv_det,
        weight_var=var_rel * inv_det * inv_det,
        ess=ess,
        std_error=math.sqrt(var_rel / n_samples) * inv_det,
        seed=seed,
    )
    if truth is not None:
        rep.true_det = float(truth)
        rep.rel_abs_diff = relative_abs_diff(rep.det_estimate, truth)
    return rep


def mc_log_weights(op: LinearOperator, n_samples: int, rng: np.random.Generator,
                   workers: int = 1) -> np.ndarray:
    s = sphere.sample_uniform(op.n, rng, n_samples)
    return _chunked_log_integrand(op, s, workers)


def _chunked_log_integrand(op, s, workers):
    return np.concatenate(_map_chunks(lambda a, b: log_integrand(op, s[a:b]), len(s), workers))


def mc_estimate(op: LinearOperator, n_samples: int, rng: np.random.Generator,
                truth: float | None = None, seed=None, workers: int = 1) -> EstimateReport:
    """Naive estimator: mean of ``||A s_i||^{-n}`` with ``s_i ~ U(S^{n-1})``."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    return _report("mc", mc_log_weights(op, n_samples, rng, workers), seed, truth)


def _push(flow: SphericalFlow, s0: np.ndarray, rng: np.random.Generator):
    """Flow images of ``s0`` with rows hitting a chart pole redrawn from ``rng``."""
    def run(x):
        with torch.no_grad():
            s, logdet = flow.forward(torch.from_numpy(x), check_poles=False)
        return s.numpy(), logdet.numpy()

    s0 = s0.copy()
    s, logdet = run(s0)
    for _ in range(MAX_RESAMPLE):
        bad = ~(np.isfinite(logdet) & np.all(np.isfinite(s), axis=-1))
        if not bad.any():
            return s, logdet, s0
        s0[bad] = sphere.sample_uniform(flow.n, rng, int(bad.sum()))
        s[bad], logdet[bad] = run(s0[bad])
    raise sphere.ChartError("flow sampling kept hitting chart poles")


def vde_log_weights(op: LinearOperator, flow: SphericalFlow, n_samples: int,
                    rng: np.random.Generator, workers: int = 1):
    """Per-sample ``log(U(s)/q(s) ||A s||^{-n})`` with ``s ~ q``.

    Also returns the flow log-Jacobians and the ``-n log||A s||`` terms.
    """
    if flow.n != op.n:
        raise ValueError(f"flow dimension {flow.n} != operator dimension {op.n}")
    s0 = sphere.sample_uniform(op.n, rng, n_samples)
    pushed = _map_chunks(lambda a, b: _push_nofix(flow, s0[a:b]), n_samples, workers)
    # pole redraws consume the generator in chunk order, independent of workers
    parts = [_fix(flow, p, rng) for p in pushed]
    s = np.concatenate([p[0] for p in parts])
    logdet = np.concatenate([p[1] for p in parts])
    log_u = sphere.log_uniform_density(op.n)
    log_q = log_u - logdet
    li = _chunked_log_integrand(op, s, workers)
    # log_u - log_q is exactly 0.0 for the identity flow
    return (log_u - log_q) + li, logdet, li


def _push_nofix(flow, s0):
    with torch.no_grad():
        s, logdet = flow.forward(torch.from_numpy(s0), check_poles=False)
    return s0, s.numpy(), logdet.numpy()


def _fix(flow, part, rng):
    s0, s, logdet = part
    bad = ~(np.isfinite(logdet) & np.all(np.isfinite(s), axis=-1))
    if not bad.any():
        return s, logdet, s0
    s_fix, ld_fix, s0_fix = _push(flow, s0[bad], rng)
    s, logdet, s0 = s.copy(), logdet.copy(), s0.copy()
    s[bad], logdet[bad], s0[bad] = s_fix, ld_fix, s0_fix
    return s, logdet, s0


def vde_estimate(op: LinearOperator, flow: SphericalFlow, n_samples: int,
                 rng: np.random.Generator, truth: float | None = None, seed=None,
                 workers: int = 1) -> EstimateReport:
    """Importance-sampled estimator with the flow as proposal.

    The report also carries the bound ``mean(-logdet + n log||A s||)`` from the
    same draws.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    log_w, logdet, li = vde_log_weights(op, flow, n_samples, rng, workers)
    rep = _report("vde", log_w, seed, truth)
    rep.kl_bound = float(np.mean(-logdet - li))
    return rep


def kl_bound_samples(op: LinearOperator, flow: SphericalFlow, n_samples: int,
                     rng: np.random.Generator, workers: int = 1) -> np.ndarray:
    """Per-sample terms ``-log|det J_f(s0)| + n log||A f(s0)||`` with ``s0 ~ U``."""
    _, logdet, li = vde_log_weights(op, flow, n_samples, rng, workers)
    terms = -logdet - li
    if not np.all(np.isfinite(terms)):
        raise EstimationError("non-finite term in the KL bound")
    return terms


def kl_bound_estimate(op: LinearOperator, flow: SphericalFlow, n_samples: int,
                      rng: np.random.Generator, workers: int = 1) -> float:
    """Monte Carlo value of the variational objective, an upper bound on log|A| in expectation."""
    return float(np.mean(kl_bound_samples(op, flow, n_samples, rng, workers)))


def relative_abs_diff(estimate: float, truth: float) -> float:
    if truth == 0:
        raise ZeroDivisionError("relative difference to a zero truth value")
    return abs(estimate - truth) / abs(truth)


def repeated_trial_stats(runner: Callable, trials: int) -> tuple[float, float]:
    """Mean and sample std (ddof=1) of ``runner`` over ``trials`` runs.

    ``runner`` is called as ``runner(i)`` with the trial index if it accepts an
    argument, else as ``runner()``.
    """
    if trials < 2:
        raise ValueError("need at least two trials for a standard deviation")
    takes_index = len(inspect.signature(runner).parameters) > 0
    vals = np.array([runner(i) if takes_index else runner() for i in range(trials)], dtype=float)
    return float(vals.mean()), float(vals.std(ddof=1))
