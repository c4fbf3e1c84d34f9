import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cqlflow import agents, nn
from cqlflow.agents import BracConfig, CqlConfig
from cqlflow.divergence import log_sum_exp, softmax

from conftest import numeric_grad, rel_err

FAST = dict(total_steps=200, eval_period=50, critic_tier="small", policy_tier="small")


# -- losses ------------------------------------------------------------------------

@given(st.integers(0, 10_000), st.floats(0.0, 5.0))
@settings(max_examples=30)
def test_critic_loss_gradient_and_decomposition(seed, alpha):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(6, 4)) * 3
    a = rng.integers(4, size=6)
    y = rng.normal(size=6)
    out = agents.cql_critic_loss(q, a, y, alpha)
    assert out.loss == alpha * out.reg + out.td
    assert out.reg >= 0  # logsumexp dominates every entry
    # independent oracle for the value
    reg = np.mean([log_sum_exp(q[i]) - q[i, a[i]] for i in range(6)])
    td = 0.5 * np.mean((q[np.arange(6), a] - y) ** 2)
    assert out.reg == pytest.approx(reg, abs=1e-12) and out.td == pytest.approx(td, abs=1e-12)
    num = numeric_grad(lambda: agents.cql_critic_loss(q, a, y, alpha).loss, q)
    assert rel_err(out.grad_q, num) < 1e-4


def test_alpha_zero_critic_loss_is_td_bit_for_bit():
    rng = np.random.default_rng(0)
    q, a, y = rng.normal(size=(8, 3)), rng.integers(3, size=8), rng.normal(size=8)
    out = agents.cql_critic_loss(q, a, y, 0.0)
    assert out.loss == out.td
    g = np.zeros_like(q)
    g[np.arange(8), a] = (q[np.arange(8), a] - y) / 8
    assert np.array_equal(out.grad_q, g)


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
@settings(max_examples=30)
def test_policy_loss_gradient(seed, ent):
    rng = np.random.default_rng(seed)
    logits, values = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    loss, grad = agents.policy_loss(logits, values, ent)
    pi = softmax(logits)
    expect = np.mean(np.sum(pi * (-values + ent * np.log(pi)), axis=1))
    assert loss == pytest.approx(expect, abs=1e-12)
    num = numeric_grad(lambda: agents.policy_loss(logits, values, ent)[0], logits)
    assert rel_err(grad, num) < 1e-4


def test_bellman_targets_by_hand():
    y = agents.bellman_targets(np.array([1.0, 0.5]), np.array([0.0, 1.0]), 0.9,
                               np.array([[1.0, 3.0], [7.0, 7.0]]), np.array([[0.5, 0.5], [1.0, 0.0]]),
                               bonus=np.array([[0.0, -1.0], [0.0, 0.0]]))
    np.testing.assert_allclose(y, [1.0 + 0.9 * (0.5 * 1 + 0.5 * 2), 0.5])


def test_initial_state_value():
    q = np.array([[1.0, 2.0], [3.0, 5.0]])
    pi = np.array([[0.5, 0.5], [0.0, 1.0]])
    assert agents.initial_state_value(q, pi, [0.25, 0.75]) == pytest.approx(0.25 * 1.5 + 0.75 * 5)


# -- configs -----------------------------------------------------------------------

def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        CqlConfig(alpha=-1)
    with pytest.raises(ValueError):
        CqlConfig(eval_period=0)
    with pytest.raises(ValueError):
        CqlConfig(critic_tier="enormous")
    with pytest.raises(ValueError):
        BracConfig(beta_div=-0.1)
    with pytest.raises(ValueError):
        CqlConfig.from_dict({"alpah": 1.0})
    cfg = BracConfig(beta_div=0.3, critic_tier="32x32")
    assert BracConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.critic_spec(4, 2).hidden_widths == (32, 32)
    assert cfg.algo == "brac" and CqlConfig().algo == "cql"


# -- training ----------------------------------------------------------------------

def test_cql_run_logs_consistent_metrics(tmp_path, grid, small_data):
    cfg = CqlConfig(alpha=0.5, **FAST)
    res = agents.train_cql(small_data, cfg, grid, run_dir=tmp_path, oracle=True)
    log = res.log
    assert list(log.steps) == [0, 50, 100, 150, 200]
    for r in log.records:
        assert r["loss"] == cfg.alpha * r["cql_reg"] + r["td_error"]
        assert r["conservative_q"] is None
        assert 0.0 <= r["eval_return"] <= 1.0
    assert [c.step for c in res.checkpoints] == list(log.steps)
    assert all(c.exists() for c in res.checkpoints)
    assert all("eval_return" not in c.metrics_at_save for c in res.checkpoints)
    assert log.meta["capacity_tier"] == "small" and log.meta["config_hash"]
    assert (tmp_path / "runlog.jsonl").exists()
    net, _, step, _ = nn.load_checkpoint(res.checkpoints[-1].policy_path)
    assert step == 200
    np.testing.assert_array_equal(agents.policy_table(net, grid.features).probs, res.snapshots[200])


def test_training_is_deterministic(tmp_path, grid, small_data):
    cfg = CqlConfig(vib_beta=0.1, dropout_p=0.1, dr3_beta=0.01, l2_rho=1e-4, **FAST)
    a = agents.train_cql(small_data, cfg, grid, run_dir=tmp_path / "a")
    b = agents.train_cql(small_data, cfg, grid, run_dir=tmp_path / "b")
    assert a.log.to_jsonl().replace(str(tmp_path / "a"), "X") == b.log.to_jsonl().replace(str(tmp_path / "b"), "X")
    c = agents.train_cql(small_data, cfg.replace(seed=1), grid)
    assert c.log.records != a.log.records
    for r in a.log.records:
        assert r["vib_kl"] >= 0 and r["dr3"] >= 0


def test_brac_beta_zero_conservative_q_equals_dataset_q(grid, small_data):
    cfg = BracConfig(beta_div=0.0, behavior_fit_steps=50, **FAST)
    log = agents.train_brac(small_data, cfg, grid).log
    for r in log.records:
        assert r["conservative_q"] == r["avg_dataset_q"]
        assert r["loss"] == r["td_error"]


def test_brac_joint_behavior_and_prefit(grid, small_data):
    beh = agents.fit_behavior(small_data, nn.MlpSpec(grid.feature_dim, (32,), 4), 300, grid.features)
    assert beh.nll < np.log(4)
    np.testing.assert_allclose(beh.probs(grid.features).sum(axis=1), 1.0)
    pre = agents.train_brac(small_data, BracConfig(**FAST), grid, behavior=beh)
    assert pre.behavior is beh and pre.log.meta["behavior_nll"] == beh.nll
    joint = agents.train_brac(small_data, BracConfig(behavior_joint=True, **FAST), grid)
    assert joint.behavior.steps == FAST["total_steps"]
    with pytest.raises(TypeError):
        agents.train_cql(small_data, BracConfig(**FAST), grid)
    with pytest.raises(TypeError):
        agents.train_brac(small_data, CqlConfig(**FAST), grid)


def test_divergence_guard_stops_run(grid, small_data):
    cfg = CqlConfig(alpha=0.0, q_bound=0.5, **FAST)
    log = agents.train_cql(small_data, cfg, grid).log
    assert log.meta["diverged_at"] is not None
    assert log.steps[-1] == log.meta["diverged_at"] < FAST["total_steps"]


def test_non_finite_metrics_abort(grid, small_data, monkeypatch):
    real = agents.bellman_targets
    monkeypatch.setattr(agents, "bellman_targets", lambda *a, **k: real(*a, **k) * np.nan)
    with pytest.raises(agents.TrainingAborted, match="td_error at step 0"):
        agents.train_cql(small_data, CqlConfig(**FAST), grid)


def test_actor_delay_and_checkpoint_period(grid, small_data):
    cfg = CqlConfig(actor_delay=3, checkpoint_period=100, **FAST)
    res = agents.train_cql(small_data, cfg, grid)
    assert [c.step for c in res.checkpoints] == [0, 100, 200]
