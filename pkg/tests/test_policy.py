"""Sequence policy: forward contracts, loss, training, rollouts."""

import numpy as np
import pytest

from rcgrid import autograd as ag
from rcgrid import encoder as enc
from rcgrid import expert, policy, reward
from rcgrid import worldgrid as wg


@pytest.fixture(scope="module")
def bundle():
    return enc.EncoderBundle.new(2)


@pytest.fixture(scope="module")
def labeled(bundle):
    demos = expert.generate_demos("corridor", "train", 3, seed=7)
    return reward.label_returns(demos, bundle)[0]


@pytest.fixture(scope="module")
def model():
    return policy.PolicyModel.new("arp_dt", seed=0)


def _window(rng, B=2, T=3):
    return (rng.normal(0, 1, (B, T, enc.MS_DIM)),
            rng.normal(0, 0.3, (B, T)),
            rng.integers(0, 4, (B, T)),
            np.tile(np.arange(T), (B, 1)))


def test_arp_forward_shapes(model):
    rng = np.random.default_rng(0)
    obs, rets, acts, times = _window(rng)
    logits, ret_pred = policy.arp_forward(model, obs, rets, acts, times)
    assert logits.shape == (2, 3, policy.N_ACTIONS)
    assert ret_pred.shape == (2, 3)


def test_arp_forward_rejects_long_window(model):
    rng = np.random.default_rng(0)
    obs, rets, acts, times = _window(rng, T=policy.CONTEXT_K + 1)
    with pytest.raises(ValueError, match="context"):
        policy.arp_forward(model, obs, rets, acts, times % policy.TIME_SLOTS)


def test_arp_forward_causal(model):
    rng = np.random.default_rng(1)
    obs, rets, acts, times = _window(rng, B=1, T=4)
    base_logits, base_ret = policy.arp_forward(model, obs, rets, acts, times)
    # perturb everything at the last step; earlier outputs must be bit-identical
    obs2, rets2, acts2 = obs.copy(), rets.copy(), acts.copy()
    obs2[:, -1] += 1.0
    rets2[:, -1] -= 0.5
    acts2[:, -1] = (acts2[:, -1] + 1) % 4
    logits, ret_pred = policy.arp_forward(model, obs2, rets2, acts2, times)
    assert np.array_equal(base_logits.data[:, :-1], logits.data[:, :-1])
    assert np.array_equal(base_ret.data[:, :-1], ret_pred.data[:, :-1])
    # within a step, the action token comes after the R position: changing
    # a_t must not affect step t's action logits
    acts3 = acts.copy()
    acts3[:, 2] = (acts3[:, 2] + 2) % 4
    logits3, _ = policy.arp_forward(model, obs, rets, acts3, times)
    assert np.array_equal(base_logits.data[:, 2], logits3.data[:, 2])


def test_arp_forward_batch_permutation(model):
    rng = np.random.default_rng(2)
    obs, rets, acts, times = _window(rng, B=3, T=2)
    logits, _ = policy.arp_forward(model, obs, rets, acts, times)
    perm = [2, 0, 1]
    plogits, _ = policy.arp_forward(model, obs[perm], rets[perm], acts[perm],
                                    times[perm])
    assert np.allclose(plogits.data, logits.data[perm], atol=1e-12)


def test_arp_loss_lambda_zero_is_pure_ce(model):
    rng = np.random.default_rng(3)
    obs, rets, acts, times = _window(rng)
    l0 = policy.arp_loss(model, obs, rets, acts, times, lam=0.0)
    logits, _ = policy.arp_forward(model, obs, rets, acts, times)
    ce = ag.cross_entropy(ag.reshape(logits, (6, 4)), acts.reshape(-1))
    assert np.isclose(l0.item(), ce.item(), atol=1e-14)
    with pytest.raises(ValueError):
        policy.arp_loss(model, obs, rets, acts, times, lam=-0.1)


def test_arp_loss_gradcheck(model):
    rng = np.random.default_rng(4)
    obs, rets, acts, times = _window(rng, B=2, T=2)
    model.set_trainable(True)
    probe = {k: model.params[k]
             for k in ("ahead.b", "rhead.b", "ret.b", "obs.b", "lnf.b")}
    try:
        err = ag.grad_check(
            lambda _: policy.arp_loss(model, obs, rets, acts, times, 0.01),
            probe, step=1e-5)
        assert err <= 1e-4
    finally:
        model.set_trainable(False)


def test_baseline_forward_and_loss(bundle):
    m = policy.PolicyModel.new("bc_text", seed=1)
    rng = np.random.default_rng(5)
    obs = rng.normal(0, 1, (2, 3, enc.MS_DIM))
    cond = rng.normal(0, 1, (enc.JOINT_DIM,))
    times = np.tile(np.arange(3), (2, 1))
    logits = policy.baseline_forward(m, obs, cond, times)
    assert logits.shape == (2, 3, policy.N_ACTIONS)
    acts = rng.integers(0, 4, (2, 3))
    loss = policy.baseline_loss(m, obs, cond, acts, times)
    assert np.isfinite(loss.item())
    with pytest.raises(ValueError):
        policy.baseline_forward(model_arp := policy.PolicyModel.new("arp_dt", 0),
                                obs, cond, times)


def test_train_policy_loss_decreases(bundle, labeled):
    m, report = policy.train_policy("arp_dt", labeled, bundle, lam=0.01,
                                    epochs=8, batch_size=8, seed=0)
    losses = [e["loss"] for e in report["epochs"]]
    assert losses[-1] < losses[0]
    assert report["fingerprint"] == m.fingerprint()


def test_train_policy_deterministic(bundle, labeled):
    a, _ = policy.train_policy("arp_dt", labeled, bundle, epochs=2,
                               batch_size=8, seed=3)
    b, _ = policy.train_policy("arp_dt", labeled, bundle, epochs=2,
                               batch_size=8, seed=3)
    assert a.fingerprint() == b.fingerprint()


def test_train_policy_fingerprint_mismatch(labeled):
    other = enc.EncoderBundle.new(99)
    with pytest.raises(policy.FingerprintMismatch):
        policy.train_policy("arp_dt", labeled, other, epochs=1, seed=0)


def test_train_baselines_run(bundle, labeled):
    for kind in ("bc_text", "bc_goal"):
        m, report = policy.train_policy(kind, labeled, bundle, epochs=2,
                                        batch_size=8, seed=0)
        assert m.kind == kind
        assert np.isfinite(report["epochs"][-1]["loss"])


def test_rollout_return_bookkeeping(bundle, labeled, model):
    level = labeled[0].base.level
    instr = labeled[0].base.instruction
    rec = policy.rollout_arp(model, bundle, level, instr, target_R=0.8,
                             C=labeled[0].norm_constant)
    R = np.asarray(rec.remaining)
    r = np.asarray(rec.rewards)
    assert np.allclose(R[:-1] - R[1:] - r[:-1], 0.0, atol=1e-12)
    assert rec.steps <= wg.MAX_EPISODE_LEN
    assert len(rec.actions) == len(rec.rewards) == len(rec.remaining)


def test_rollout_deterministic(bundle, labeled, model):
    level = labeled[0].base.level
    instr = labeled[0].base.instruction
    a = policy.rollout_arp(model, bundle, level, instr, 0.8, 11.0)
    b = policy.rollout_arp(model, bundle, level, instr, 0.8, 11.0)
    assert a.actions == b.actions


def test_rollout_requires_C(bundle, labeled, model):
    with pytest.raises(ValueError):
        policy.rollout_arp(model, bundle, labeled[0].base.level,
                           labeled[0].base.instruction, 0.8, None)


def test_rollout_baseline_goal_needs_goal_obs(bundle, labeled):
    m = policy.PolicyModel.new("bc_goal", seed=0)
    with pytest.raises(ValueError, match="goal"):
        policy.rollout_baseline(m, bundle, labeled[0].base.level,
                                labeled[0].base.instruction)
    goal = policy.goal_observation(labeled[0].base.level)
    rec = policy.rollout_baseline(m, bundle, labeled[0].base.level,
                                  labeled[0].base.instruction, goal_obs=goal)
    assert rec.steps > 0


def test_trained_arp_solves_corridor_train(bundle, labeled):
    # corridor train demos are all "right"; a briefly trained model should
    # reproduce them on the training level
    m, _ = policy.train_policy("arp_dt", labeled, bundle, epochs=25,
                               batch_size=8, seed=0)
    lt = labeled[0]
    stats = reward.ReturnStats([x.returns[0] for x in labeled])
    rec = policy.rollout_arp(m, bundle, lt.base.level, lt.base.instruction,
                             stats.quantile(0.9), lt.norm_constant)
    assert rec.success


def test_policy_checkpoint_roundtrip(tmp_path, model):
    path = tmp_path / "pol.bin"
    model.meta = {"lam": 0.01}
    policy.save_policy(model, path)
    loaded = policy.load_policy(path)
    assert loaded.kind == model.kind
    assert loaded.meta["lam"] == 0.01
    assert loaded.fingerprint() == model.fingerprint()
