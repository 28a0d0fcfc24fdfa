"""Encoder fine-tuning: temporal-smoothness + inverse-dynamics objectives.

Only the adapter parameters (and a throwaway action-prediction head) are
trained; the towers and joint projections stay frozen, so every frame's
multi-scale features are computed once up front and the optimization loop
touches only the tiny adapter/head MLPs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import reward as rw
from . import worldgrid as wg
from .autograd import Tensor
from .encoder import EncoderBundle, JOINT_DIM
from .optim import AdamW, clip_global_norm, lr_schedule
from .rng import Rng, xavier_uniform

IDM_HIDDEN = 64


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class FtBatch:
    """One fine-tuning batch over precomputed multi-scale features.

    init_ms: (B, 96) first-frame features of the transitions' trajectories;
    t_ms / tp1_ms: (B, 96) features of o_t and o_{t+1}; actions: (B,) expert
    action indices; instr_ms: (1, 96) instruction features.
    """
    init_ms: np.ndarray
    t_ms: np.ndarray
    tp1_ms: np.ndarray
    actions: np.ndarray
    instr_ms: np.ndarray


def init_idm_head(seed):
    rng = Rng(seed, stream_id=0x1D4)
    d_in = 3 * JOINT_DIM
    head = {
        "idm.W1": xavier_uniform(rng, d_in, IDM_HIDDEN, (d_in, IDM_HIDDEN)),
        "idm.b1": np.zeros(IDM_HIDDEN),
        "idm.W2": xavier_uniform(rng, IDM_HIDDEN, len(wg.ACTIONS),
                                 (IDM_HIDDEN, len(wg.ACTIONS))),
        "idm.b2": np.zeros(len(wg.ACTIONS)),
    }
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in head.items()}


def _rewards(bundle, ms, instr_ms):
    # both joint embeddings are unit-normalized, so the dot is the cosine
    img = bundle.joint_image(ag.as_tensor(ms))
    txt = bundle.joint_text(ag.as_tensor(instr_ms))  # (1, d)
    return ag.reshape(ag.matmul(img, ag.transpose(txt, (1, 0))), (len(ms),))


def vip_loss(bundle, batch, gamma_ft):
    """(1-g)*mean r(o1) + log-mean-exp(r(o_t) + 1 - g*r(o_t+1))."""
    if len(batch.init_ms) == 0 or len(batch.t_ms) == 0:
        raise ValueError("empty initial-observation or transition set")
    if not 0.0 < gamma_ft < 1.0:
        raise ValueError(f"gamma_ft must be in (0, 1), got {gamma_ft}")
    r1 = _rewards(bundle, batch.init_ms, batch.instr_ms)
    rt = _rewards(bundle, batch.t_ms, batch.instr_ms)
    rtp1 = _rewards(bundle, batch.tp1_ms, batch.instr_ms)
    z = ag.add(ag.add(rt, ag.mul(rtp1, -gamma_ft)), 1.0)
    lme = ag.add(ag.logsumexp(z), -math.log(len(batch.t_ms)))
    return ag.add(ag.mul(ag.tmean(r1), 1.0 - gamma_ft), lme)


def idm_loss(bundle, head, batch):
    """Cross-entropy of the action head over (e_t, e_t+1, e_x) embeddings."""
    if len(batch.t_ms) == 0:
        raise ValueError("empty transition set")
    et = bundle.joint_image(ag.as_tensor(batch.t_ms))
    etp1 = bundle.joint_image(ag.as_tensor(batch.tp1_ms))
    ex = bundle.joint_text(ag.as_tensor(batch.instr_ms))  # (1, d)
    ones = np.ones((len(batch.t_ms), 1))
    x = ag.concat([et, etp1, ag.matmul(ag.as_tensor(ones), ex)], axis=-1)
    h = ag.gelu(ag.add(ag.matmul(x, head["idm.W1"]), head["idm.b1"]))
    logits = ag.add(ag.matmul(h, head["idm.W2"]), head["idm.b2"])
    return ag.cross_entropy(logits, batch.actions)


def precompute_features(bundle, dataset, instruction=None, chunk=64):
    """Frozen multi-scale features for every frame of every trajectory.

    Returns (per-trajectory feature arrays, instruction features (1, 96)).
    """
    feats = []
    for traj in dataset.records:
        frames = rw.trajectory_frames(traj)
        parts = [bundle.vision_multiscale(frames[lo:lo + chunk]).data
                 for lo in range(0, len(frames), chunk)]
        feats.append(np.concatenate(parts, axis=0))
    instr = instruction if instruction is not None \
        else dataset.records[0].instruction
    instr_ms = bundle.text_multiscale(instr.token_ids).data
    return feats, instr_ms


def _transitions(dataset):
    out = []
    for i, traj in enumerate(dataset.records):
        for t, action in enumerate(traj.actions):
            out.append((i, t, wg.ACTIONS.index(action)))
    return out


def _make_batch(feats, instr_ms, transitions, idx):
    chosen = [transitions[i] for i in idx]
    return FtBatch(
        init_ms=np.stack([feats[i][0] for i, _, _ in chosen]),
        t_ms=np.stack([feats[i][t] for i, t, _ in chosen]),
        tp1_ms=np.stack([feats[i][t + 1] for i, t, _ in chosen]),
        actions=np.array([a for _, _, a in chosen], dtype=np.int64),
        instr_ms=instr_ms,
    )


def finetune(bundle, dataset, beta, epochs=20, val_split=0.1, gamma_ft=0.98,
             lr=1e-4, weight_decay=1e-3, batch_size=64, seed=0, use_vip=True,
             log=None):
    """Adapter-only fine-tuning; keeps the lowest-validation-loss snapshot.

    Returns (fine-tuned bundle, report dict). The input bundle is not
    modified; the action head is dropped from the result.
    """
    from . import expert
    src = bundle
    bundle = EncoderBundle({k: Tensor(v.data.copy(), name=k)
                            for k, v in src.params.items()}, alpha=src.alpha)
    head = init_idm_head(seed)
    tr_recs, va_recs = expert.train_val_split(dataset, val_split)
    train_set = expert.DemoDataset(records=tr_recs, meta=dataset.meta)
    val_set = expert.DemoDataset(records=va_recs or tr_recs, meta=dataset.meta)
    feats_tr, instr_ms = precompute_features(bundle, train_set)
    feats_va, _ = precompute_features(bundle, val_set)
    trans_tr = _transitions(train_set)
    trans_va = _transitions(val_set)
    trainable = dict(bundle.adapter_params())
    trainable.update(head)
    bundle.set_trainable(set(trainable))
    opt = AdamW(trainable, lr=lr, betas=(0.9, 0.999),
                weight_decay=weight_decay)
    rng = Rng(seed, stream_id=0xF7)
    steps_per = max(1, len(trans_tr) // batch_size)
    steps_total = epochs * steps_per
    warmup = min(max(1, int(steps_total * 0.05)), max(0, steps_total - 1))

    if not use_vip and not beta:
        raise ValueError("fine-tuning with both objectives off is a no-op")

    def total_loss(batch):
        parts = []
        if use_vip:
            parts.append(vip_loss(bundle, batch, gamma_ft))
        if beta:
            parts.append(ag.mul(idm_loss(bundle, head, batch), beta))
        return parts[0] if len(parts) == 1 else ag.add(*parts)

    def val_loss():
        batch = _make_batch(feats_va, instr_ms, trans_va,
                            range(len(trans_va)))
        return total_loss(batch).item()

    report = {"epochs": [], "beta": beta, "gamma_ft": gamma_ft,
              "selected_epoch": None}
    best = (np.inf, None)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(trans_tr))
        losses = []
        for b in range(steps_per):
            idx = order[b * batch_size:(b + 1) * batch_size]
            if len(idx) == 0:
                continue
            loss = total_loss(_make_batch(feats_tr, instr_ms, trans_tr, idx))
            if not np.isfinite(loss.item()):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            grads = ag.backward(loss, trainable)
            clip_global_norm(grads, 1.0)
            opt.step(grads, lr=lr_schedule(step, steps_total, lr, warmup))
            step += 1
            losses.append(loss.item())
        vl = val_loss()
        report["epochs"].append({"epoch": epoch + 1,
                                 "train_loss": float(np.mean(losses)),
                                 "val_loss": vl})
        if vl < best[0]:
            best = (vl, {k: v.data.copy()
                         for k, v in bundle.adapter_params().items()})
            report["selected_epoch"] = epoch + 1
        if log:
            log(f"finetune epoch {epoch + 1}/{epochs} "
                f"train {np.mean(losses):.4f} val {vl:.4f}")
    for k, v in best[1].items():
        bundle.params[k].data = v
    bundle.set_trainable(set())
    report["selected_val_loss"] = best[0]
    report["fingerprint"] = bundle.fingerprint()
    return bundle, report


def save_report(path, report):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
