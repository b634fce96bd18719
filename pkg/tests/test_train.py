import math

import numpy as np
import pytest
import torch

from detflow import flows, operators as O, sphere, train as T


def test_scaled_identity_objective_is_constant():
    c = 3.0
    op = O.DenseOperator(c * np.eye(4))
    cfg = T.TrainConfig(flow=flows.dense_spec(4), iterations=30, batch_size=64, seed=0)
    params, trace = T.train(cfg, op)
    # the identity start is already optimal: the first value is exact and later
    # batches only carry the -logdet noise of a random walk around it
    assert abs(trace.objective[0] - 4 * math.log(c)) < 1e-12
    assert abs(np.mean(trace.objective) - 4 * math.log(c)) < 0.05
    from detflow import estimators as E

    flow = flows.SphericalFlow(cfg.flow, params)
    terms = E.kl_bound_samples(op, flow, 20_000, np.random.default_rng(0))
    assert terms.mean() > 4 * math.log(c) - 3 * terms.std() / math.sqrt(len(terms))


def test_identity_flow_identity_operator_objective_is_zero():
    f = flows.build_flow(flows.dense_spec(5), 0)
    s0 = sphere.sample_uniform(5, np.random.default_rng(0), 32)
    assert abs(T.objective_batch(O.DenseOperator(np.eye(5)), f, f.params, s0).item()) < 1e-15


def test_objective_batch_matches_plain_evaluation():
    op = O.load_fixture("A4")
    f = flows.build_flow(flows.dense_spec(10), 0)
    s0 = sphere.sample_uniform(10, np.random.default_rng(1), 256)
    val = T.objective_batch(op, f, f.params, s0).item()
    plain = float(torch.mean(10 * torch.log(torch.linalg.vector_norm(
        op.matvec_torch(torch.from_numpy(s0)), dim=-1))))
    assert val == plain


def test_objective_resamples_poles():
    op = O.load_fixture("cover3x3")
    f = flows.randomize_outputs(flows.build_flow(flows.cover_spec(3), 0), 1, 0.2)
    s0 = sphere.sample_uniform(3, np.random.default_rng(2), 8)
    s0[3] = [0.0, 0.0, 1.0]
    with pytest.raises(sphere.ChartError):
        T.objective_batch(op, f, f.params, s0)
    assert math.isfinite(T.objective_batch(op, f, f.params, s0, np.random.default_rng(0)).item())


def test_training_is_deterministic(tmp_path):
    op = O.load_fixture("cover3x3")
    cfg = T.TrainConfig(flow=flows.cover_spec(3), iterations=15, batch_size=64, seed=4)
    p1, t1 = T.train(cfg, op)
    p2, t2 = T.train(cfg, op)
    assert torch.equal(p1.values, p2.values)
    assert t1.objective == t2.objective and t1.grad_norm == t2.grad_norm
    t1.write_csv(tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "iteration,objective,grad_norm,elapsed_s"


def test_adam_first_step_is_lr_sign():
    opt = T.Adam(3, 1e-3, 0.9, 0.999, 1e-8)
    out = opt.step(torch.zeros(3, dtype=torch.float64), torch.tensor([2.0, -0.5, 1e-3], dtype=torch.float64))
    np.testing.assert_allclose(out.numpy(), [-1e-3, 1e-3, -1e-3], rtol=1e-4)


def test_divergence_aborts_and_keeps_checkpoint(tmp_path, monkeypatch):
    monkeypatch.setattr(T, "DIVERGENCE_NATS", -1.0)
    monkeypatch.setattr(T, "DIVERGENCE_PATIENCE", 3)
    ck = tmp_path / "ck.json"
    cfg = T.TrainConfig(flow=flows.cover_spec(3), iterations=50, batch_size=32, seed=0,
                        checkpoint_path=str(ck))
    with pytest.raises(T.TrainingDiverged) as err:
        T.train(cfg, O.load_fixture("cover3x3"))
    assert len(err.value.trace.objective) == 3 and ck.exists()
    flow, doc = T.load_flow(ck)
    assert flow.spec == cfg.flow and doc["step"] == 2


def test_evaluation_records(tmp_path):
    cfg = T.TrainConfig(flow=flows.cover_spec(3), iterations=10, batch_size=32, seed=0,
                        eval_every=5, eval_samples=200)
    _, trace = T.train(cfg, O.load_fixture("cover3x3"))
    assert [e["iteration"] for e in trace.evals] == [5, 10]
    assert {"kl_bound", "vde_rel_abs_diff", "ess"} <= set(trace.evals[0])
    trace.write_eval_csv(tmp_path / "eval.csv")
    assert (tmp_path / "eval.csv").exists()


def test_profiles():
    assert T.profile_config("desk", 10).iterations == 2000
    assert T.profile_config("desk", 16, kind="conv").iterations == 10_000
    assert T.profile_config("desk", 16, kind="conv").batch_size == 1024
    assert T.profile_config("paper-dense", 10).batch_size == 1024
    assert T.profile_config("paper-conv", 16, kind="conv").iterations == 40_000
    with pytest.raises(ValueError):
        T.profile_config("huge", 10)
    with pytest.raises(ValueError):
        T.TrainConfig(flow=flows.dense_spec(3), lr=0)
    cfg = T.profile_config("desk", 10, seed=3)
    assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_short_training_tightens_bound_on_cover():
    from detflow import estimators as E

    op = O.load_fixture("cover3x3")
    truth = O.oracle_logabsdet(op)
    cfg = T.TrainConfig(flow=flows.cover_spec(3), iterations=300, batch_size=256, seed=1)
    params, trace = T.train(cfg, op)
    assert trace.objective[-1] < trace.objective[0]
    before = flows.build_flow(cfg.flow, 0)
    after = flows.SphericalFlow(cfg.flow, params)
    gaps = []
    for flow in (before, after):
        terms = E.kl_bound_samples(op, flow, 20_000, np.random.default_rng(0))
        # the bound holds on both sides of training
        assert terms.mean() > truth - 3 * terms.std() / math.sqrt(len(terms))
        gaps.append(terms.mean() - truth)
    assert gaps[1] < 0.25 * gaps[0]
    vde = E.vde_estimate(op, after, 20_000, np.random.default_rng(1))
    mc = E.mc_estimate(op, 20_000, np.random.default_rng(1))
    assert vde.weight_var < mc.weight_var
