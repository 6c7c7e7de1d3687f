import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from etcomm import comm, mappo, nets
from etcomm.mappo import TrainConfig, Trainer
from helpers import expected_slots, mixed_trigger_config
from oracles import gae_double_sum


def make_trainer(c, **train):
    tcfg = TrainConfig(**{**c["train"].__dict__, **train})
    return Trainer(c["env"], c["net"], tcfg, c["loss"], c["trigger"])


def test_train_config_validation():
    for bad in ({"gamma": 1.5}, {"clip_eps": 0}, {"lr": -1}, {"ppo_epochs": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


@settings(max_examples=50)
@given(st.integers(1, 30), st.integers(0, 10_000))
def test_gae_matches_double_sum(T, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=T), rng.normal(size=T + 1)
    np.testing.assert_allclose(mappo.gae(r, v, 0.8, 0.95), gae_double_sum(r, v, 0.8, 0.95), atol=1e-10)


def test_gae_special_cases():
    r, v = np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.1, -0.2, 0.0])
    td = r + 0.9 * v[1:] - v[:-1]
    np.testing.assert_allclose(mappo.gae(r, v, 0.9, 0.0), td)
    mc = np.array([sum(0.9 ** (k - t) * r[k] for k in range(t, 3)) for t in range(3)])
    np.testing.assert_allclose(mappo.gae(r, v, 0.9, 1.0), mc - v[:-1])
    with pytest.raises(ValueError):
        mappo.gae(r, v[:-1], 0.9, 0.9)


def test_actor_objective_at_unit_ratio_is_mean_advantage():
    adv = torch.randn(50, dtype=torch.float64)
    logp = torch.randn(50, dtype=torch.float64)
    assert mappo.actor_objective(logp, logp.clone(), adv, 0.2).item() == pytest.approx(adv.mean().item(), abs=1e-12)


@pytest.mark.parametrize("beta", [0.5, 0.79, 0.8, 0.81, 1.0, 1.19, 1.2, 1.21, 2.0])
@pytest.mark.parametrize("a", [-1.0, 1.0])
def test_clip_engages_outside_band(beta, a):
    eps = 0.2
    new = torch.tensor([np.log(beta)], dtype=torch.float64, requires_grad=True)
    obj = mappo.actor_objective(new, torch.zeros(1, dtype=torch.float64), torch.tensor([a], dtype=torch.float64), eps)
    obj.backward()
    clipped = (a > 0 and beta > 1 + eps) or (a < 0 and beta < 1 - eps)
    assert (new.grad.item() == 0.0) == clipped
    expected = min(beta * a, float(np.clip(beta, 1 - eps, 1 + eps)) * a)
    assert obj.item() == pytest.approx(expected)


def test_value_objective():
    v_new = torch.tensor([1.0, 2.0], dtype=torch.float64)
    v_old = torch.tensor([0.5, 1.0], dtype=torch.float64)
    adv = torch.tensor([0.5, 2.0], dtype=torch.float64)
    assert mappo.value_objective(v_new, v_old, adv).item() == pytest.approx(-(0 + 1) / 2)


def test_rollout_is_reproducible_and_consistent(small_cfgs, small_params):
    c = small_cfgs
    g1, g2 = torch.Generator().manual_seed(0), torch.Generator().manual_seed(0)
    a = mappo.collect_rollout(c["env"], small_params, c["trigger"], 0.3, 11, g1)
    b = mappo.collect_rollout(c["env"], small_params, c["trigger"], 0.3, 11, g2)
    assert np.array_equal(a.rewards, b.rewards)
    assert torch.equal(a.actions, b.actions)
    T, N = 10, 4
    assert a.obs.shape == (T, N, 20) and a.received.shape == (T, N, N, 8)
    assert a.o_g.shape == (T, 16) and a.global_state.shape == (T, 48)
    np.testing.assert_allclose(mappo.replay_rewards(c["env"], a), a.rewards, rtol=0, atol=0)
    np.testing.assert_allclose(a.returns, a.advantages + a.values.numpy())
    assert a.message_volume == a.valid.sum().item() * 8
    assert len(a.trigger_log.rows) == T * N


def test_void_slots_are_zero_in_rollout(small_cfgs, small_params):
    c = small_cfgs
    trig = mixed_trigger_config(c["env"], small_params, 2)
    b = mappo.collect_rollout(c["env"], small_params, trig, 0.3, 2, torch.Generator().manual_seed(1))
    assert 0 < b.valid[1:].sum() < b.valid[1:].numel()
    for t, exp in enumerate(expected_slots(c["env"], b)):
        assert np.array_equal(b.received[t].numpy(), exp)


def test_first_replay_reproduces_rollout(small_cfgs, small_params):
    c = small_cfgs
    b = mappo.collect_rollout(c["env"], small_params, c["trigger"], 0.3, 4, torch.Generator().manual_seed(0))
    ev = mappo.evaluate(small_params, b, 0.3)
    torch.testing.assert_close(ev.logp, b.old_logp, rtol=0, atol=1e-12)
    torch.testing.assert_close(ev.e_hat, b.e_hat, rtol=0, atol=1e-12)
    torch.testing.assert_close(ev.kappa, b.kappa, rtol=0, atol=1e-12)
    torch.testing.assert_close(ev.values, b.values, rtol=0, atol=1e-12)


def test_first_pass_ratio_is_one(small_cfgs):
    tr = make_trainer(small_cfgs)
    old = tr.params.clone_frozen()
    batch = tr.rollout(old)
    ev = mappo.evaluate(tr.params, batch, tr.sigma)
    loss = mappo.composite_loss(ev, [batch], tr.sigma, tr.train_cfg, tr.loss_cfg)
    adv = mappo.normalize(torch.from_numpy(batch.advantages).unsqueeze(1).expand(-1, 4).reshape(-1))
    assert loss.ratio_mean == pytest.approx(1.0, abs=1e-12)
    assert loss.actor == pytest.approx(adv.mean().item(), abs=1e-6)


def test_train_epoch_logs_loss_fields(small_cfgs, tmp_path):
    tr = make_trainer(small_cfgs)
    path = tmp_path / "m.jsonl"
    rows = tr.train(2, metrics_path=path)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert lines == rows and [r["epoch"] for r in rows] == [0, 1]
    for k in ("epoch", "j_mappo", "ce", "etm", "gib_match", "gib_compress", "total"):
        assert k in rows[0]
    assert rows[1]["sigma"] < rows[0]["sigma"]


def test_training_changes_parameters(small_cfgs):
    tr = make_trainer(small_cfgs)
    before = [p.clone() for p in tr.params.parameters()]
    tr.train_epoch()
    assert any(not torch.equal(a, b) for a, b in zip(before, tr.params.parameters()))


def test_minibatch_and_multi_episode(small_cfgs):
    tr = make_trainer(small_cfgs, minibatch=8, episodes_per_epoch=2)
    row = tr.train_epoch()
    assert np.isfinite(row["total"])


def test_resume_matches_uninterrupted(small_cfgs, tmp_path):
    full = make_trainer(small_cfgs)
    full.train(3)
    part = make_trainer(small_cfgs)
    part.train(1)
    part.save(tmp_path / "c.pt")
    resumed = make_trainer(small_cfgs)
    resumed.load(tmp_path / "c.pt")
    assert resumed.epoch == 1
    s_a, s_b = part.optimizer.state_dict(), resumed.optimizer.state_dict()
    for k in s_a["state"]:
        for name in ("exp_avg", "exp_avg_sq", "step"):
            assert torch.equal(s_a["state"][k][name], s_b["state"][k][name])
    rows = resumed.train(2)
    for a, b in zip(full.params.parameters(), resumed.params.parameters()):
        assert torch.equal(a, b)
    assert rows[-1]["epoch"] == 2


def test_non_finite_loss_raises(small_cfgs):
    tr = make_trainer(small_cfgs)
    with torch.no_grad():
        tr.params.phi[0].weight.fill_(float("nan"))
    with pytest.raises(mappo.TrainingDivergedError):
        tr.train_epoch()


def test_agent_count_mismatch(small_cfgs):
    c = small_cfgs
    with pytest.raises(ValueError):
        Trainer(c["env"], nets.NetConfig(n_agents=5, d_m=8, d_pe=8, n_heads=2), c["train"], c["loss"], c["trigger"])


def test_gib_weight_gated_by_epoch(small_cfgs):
    from dataclasses import replace

    c = small_cfgs
    tr = Trainer(c["env"], c["net"], c["train"], replace(c["loss"], gib_start_epoch=1), c["trigger"])
    batch = tr.rollout(tr.params.clone_frozen())
    ev = mappo.evaluate(tr.params, batch, tr.sigma)
    early = mappo.composite_loss(ev, [batch], tr.sigma, tr.train_cfg, tr.loss_cfg, epoch=0)
    late = mappo.composite_loss(ev, [batch], tr.sigma, tr.train_cfg, tr.loss_cfg, epoch=1)
    assert late.total.item() - early.total.item() == pytest.approx(c["loss"].rho * late.gib)
