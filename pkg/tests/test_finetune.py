"""Fine-tuning objectives and the adapter-only training loop."""

import numpy as np
import pytest

from rcgrid import autograd as ag
from rcgrid import encoder as enc
from rcgrid import expert, finetune
from rcgrid.autograd import Tensor


@pytest.fixture(scope="module")
def bundle():
    return enc.EncoderBundle.new(5)


@pytest.fixture(scope="module")
def demos():
    return expert.generate_demos("corridor", "train", 6, seed=4)


@pytest.fixture(scope="module")
def feats(bundle, demos):
    return finetune.precompute_features(bundle, demos)


def _batch(feats, n=8):
    per_traj, instr_ms = feats
    trans = []
    for i, f in enumerate(per_traj):
        trans += [(i, t, t % 4) for t in range(len(f) - 1)]
    return finetune._make_batch(per_traj, instr_ms, trans, range(n))


class _FixedRewards:
    """Stub bundle whose per-row reward is read straight from column 0."""

    def joint_image(self, ms):
        return ms

    joint_text = joint_image


def _reward_batch(r1, pairs):
    # instr embedding e1; "image embeddings" carry the target reward in col 0
    d = 4
    def emb(r):
        v = np.zeros(d)
        v[0] = r
        return v
    return finetune.FtBatch(
        init_ms=np.stack([emb(r) for r in r1]),
        t_ms=np.stack([emb(a) for a, _ in pairs]),
        tp1_ms=np.stack([emb(b) for _, b in pairs]),
        actions=np.zeros(len(pairs), dtype=np.int64),
        instr_ms=np.eye(d)[:1],
    )


def test_vip_loss_hand_value():
    # gamma=0.98, r(o1)=0.5, one pair (0.5, 0.6):
    # 0.02*0.5 + log-mean-exp over one element (0.5 + 1 - 0.98*0.6) = 0.922
    batch = _reward_batch([0.5], [(0.5, 0.6)])
    loss = finetune.vip_loss(_FixedRewards(), batch, gamma_ft=0.98)
    assert np.isclose(loss.item(), 0.922, atol=1e-12)


def test_vip_loss_gamma_one_limit():
    # near gamma=1 with r_t == r_t+1 the first term vanishes and the
    # log-mean-exp exponent is exactly 1
    batch = _reward_batch([0.3], [(0.4, 0.4)])
    loss = finetune.vip_loss(_FixedRewards(), batch, gamma_ft=1.0 - 1e-12)
    assert np.isclose(loss.item(), 1.0, atol=1e-9)


def test_vip_loss_rejects_bad_inputs():
    batch = _reward_batch([0.5], [(0.5, 0.6)])
    with pytest.raises(ValueError):
        finetune.vip_loss(_FixedRewards(), batch, gamma_ft=1.0)
    empty = finetune.FtBatch(init_ms=np.zeros((0, 4)), t_ms=np.zeros((0, 4)),
                             tp1_ms=np.zeros((0, 4)),
                             actions=np.zeros(0, dtype=np.int64),
                             instr_ms=np.eye(4)[:1])
    with pytest.raises(ValueError):
        finetune.vip_loss(_FixedRewards(), empty, gamma_ft=0.98)


def test_idm_loss_uniform_logits(bundle, feats):
    batch = _batch(feats)
    head = finetune.init_idm_head(0)
    # zero final layer -> uniform logits -> ln 4
    head["idm.W2"].data[:] = 0.0
    head["idm.b2"].data[:] = 0.0
    loss = finetune.idm_loss(bundle, head, batch)
    assert np.isclose(loss.item(), np.log(4.0))


def test_idm_loss_perfect_logits(bundle, feats):
    per_traj, instr_ms = feats
    single = finetune.FtBatch(init_ms=per_traj[0][:1], t_ms=per_traj[0][:1],
                              tp1_ms=per_traj[0][1:2],
                              actions=np.array([2], dtype=np.int64),
                              instr_ms=instr_ms)
    head = finetune.init_idm_head(0)
    # force a huge margin on the true action; cross-entropy -> 0
    head["idm.W1"].data[:] = 0.0
    head["idm.b1"].data[:] = 0.0
    head["idm.W2"].data[:] = 0.0
    head["idm.b2"].data[:] = -50.0
    head["idm.b2"].data[2] = 50.0
    loss = finetune.idm_loss(bundle, head, single)
    assert loss.item() < 1e-12


def test_vip_and_idm_gradcheck(bundle, feats):
    batch = _batch(feats, n=4)
    head = finetune.init_idm_head(1)
    bundle.set_trainable(set(bundle.adapter_params()))
    # nudge adapters off their zero init so the check probes a generic point,
    # and probe only the bias vectors to keep the sweep fast
    rng = np.random.default_rng(0)
    for k in ("vad.W2", "tad.W2"):
        bundle.params[k].data[:] = rng.normal(0, 0.05, bundle.params[k].shape)
    probe = {k: bundle.params[k]
             for k in ("vad.b1", "vad.b2", "tad.b1", "tad.b2")}
    try:
        err = ag.grad_check(
            lambda _: finetune.vip_loss(bundle, batch, 0.98), probe, step=1e-4)
        assert err <= 1e-4
        probe.update({k: head[k] for k in ("idm.b1", "idm.b2")})
        err = ag.grad_check(
            lambda _: finetune.idm_loss(bundle, head, batch), probe, step=1e-4)
        assert err <= 1e-4
    finally:
        for k in ("vad.W2", "tad.W2"):
            bundle.params[k].data[:] = 0.0
        bundle.set_trainable(set())


def test_finetune_trains_only_adapters(bundle, demos):
    towers_before = {k: v.data.copy() for k, v in bundle.tower_params().items()}
    proj_before = {k: bundle.params[k].data.copy()
                   for k in ("vis.proj", "txt.proj")}
    tuned, report = finetune.finetune(bundle, demos, beta=1.5, epochs=2,
                                      batch_size=16, seed=0)
    for k, v in towers_before.items():
        assert np.array_equal(tuned.params[k].data, v)
    for k, v in proj_before.items():
        assert np.array_equal(tuned.params[k].data, v)
    changed = any(not np.array_equal(tuned.params[k].data,
                                     bundle.params[k].data)
                  for k in bundle.adapter_params())
    assert changed
    assert "idm.W1" not in tuned.params
    assert report["selected_epoch"] is not None
    assert report["selected_val_loss"] <= report["epochs"][0]["val_loss"]


def test_finetune_deterministic(bundle, demos):
    a, _ = finetune.finetune(bundle, demos, beta=1.5, epochs=1,
                             batch_size=16, seed=0)
    b, _ = finetune.finetune(bundle, demos, beta=1.5, epochs=1,
                             batch_size=16, seed=0)
    assert a.fingerprint() == b.fingerprint()


def test_finetune_beta_zero_skips_idm(bundle, demos):
    tuned, report = finetune.finetune(bundle, demos, beta=0.0, epochs=1,
                                      batch_size=16, seed=0)
    assert report["beta"] == 0.0
    assert np.isfinite(report["epochs"][0]["val_loss"])


def test_finetune_does_not_mutate_input(bundle, demos):
    fp = bundle.fingerprint()
    finetune.finetune(bundle, demos, beta=1.5, epochs=1, batch_size=16, seed=0)
    assert bundle.fingerprint() == fp


def test_report_roundtrip(tmp_path, bundle, demos):
    _, report = finetune.finetune(bundle, demos, beta=1.5, epochs=1,
                                  batch_size=16, seed=0)
    path = tmp_path / "ft.json"
    finetune.save_report(path, report)
    import json
    assert json.loads(path.read_text())["fingerprint"] == report["fingerprint"]
