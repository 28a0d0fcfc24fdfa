"""Return-conditioned sequence policy and conditioned behavior-cloning baselines.

arp_dt / gc_dt model episodes as interleaved (o_t, R_t, a_t) token triples in
a small causal transformer; action logits are read at the R positions and a
scalar return prediction at the o positions. bc_text / bc_goal collapse each
step to a single token built from the observation features and a static
conditioning embedding, and use the action cross-entropy alone.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import reward as rw
from . import worldgrid as wg
from .autograd import Tensor
from .encoder import (JOINT_DIM, MS_DIM, load_params, save_params)
from .optim import AdamW, clip_global_norm, lr_schedule
from .rng import Rng, xavier_uniform

WIDTH = 64
HEADS = 4
HEAD_DIM = WIDTH // HEADS
BLOCKS = 2
MLP_HIDDEN = 128
CONTEXT_K = 4
N_ACTIONS = len(wg.ACTIONS)
START_ACTION = N_ACTIONS            # extra embedder row for the unfilled slot
TIME_SLOTS = wg.MAX_EPISODE_LEN + 1

KINDS = ("arp_dt", "bc_text", "bc_goal", "gc_dt")
RETURN_KINDS = ("arp_dt", "gc_dt")


class FingerprintMismatch(ValueError):
    pass


def _specs(kind):
    specs = [("time.tok", (TIME_SLOTS, WIDTH), "embed")]
    if kind in RETURN_KINDS:
        specs += [("obs.W", (MS_DIM, WIDTH), "xavier"),
                  ("obs.b", (WIDTH,), "zeros"),
                  ("ret.W", (1, WIDTH), "xavier"), ("ret.b", (WIDTH,), "zeros"),
                  ("act.tok", (N_ACTIONS + 1, WIDTH), "embed"),
                  ("rhead.W", (WIDTH, 1), "xavier"), ("rhead.b", (1,), "zeros")]
    else:
        # baselines project (obs feature, conditioning) through one linear
        specs += [("cond.W", (MS_DIM + JOINT_DIM, WIDTH), "xavier"),
                  ("cond.b", (WIDTH,), "zeros")]
    for i in range(BLOCKS):
        b = f"tb{i}"
        specs += [
            (f"{b}.ln1.g", (WIDTH,), "ones"), (f"{b}.ln1.b", (WIDTH,), "zeros"),
            (f"{b}.attn.Wq", (WIDTH, WIDTH), "xavier"), (f"{b}.attn.bq", (WIDTH,), "zeros"),
            (f"{b}.attn.Wk", (WIDTH, WIDTH), "xavier"), (f"{b}.attn.bk", (WIDTH,), "zeros"),
            (f"{b}.attn.Wv", (WIDTH, WIDTH), "xavier"), (f"{b}.attn.bv", (WIDTH,), "zeros"),
            (f"{b}.attn.Wo", (WIDTH, WIDTH), "xavier"), (f"{b}.attn.bo", (WIDTH,), "zeros"),
            (f"{b}.ln2.g", (WIDTH,), "ones"), (f"{b}.ln2.b", (WIDTH,), "zeros"),
            (f"{b}.mlp.W1", (WIDTH, MLP_HIDDEN), "xavier"), (f"{b}.mlp.b1", (MLP_HIDDEN,), "zeros"),
            (f"{b}.mlp.W2", (MLP_HIDDEN, WIDTH), "xavier"), (f"{b}.mlp.b2", (WIDTH,), "zeros"),
        ]
    specs += [("lnf.g", (WIDTH,), "ones"), ("lnf.b", (WIDTH,), "zeros"),
              ("ahead.W", (WIDTH, N_ACTIONS), "xavier"),
              ("ahead.b", (N_ACTIONS,), "zeros")]
    return specs


class PolicyModel:
    def __init__(self, kind, params, meta=None):
        if kind not in KINDS:
            raise ValueError(f"unknown policy kind {kind!r}")
        self.kind = kind
        self.params = params
        self.meta = dict(meta or {})

    @staticmethod
    def new(kind, seed):
        rng = Rng(seed, stream_id=0x90C)
        params = {}
        for name, shape, init in _specs(kind):
            if init == "zeros":
                data = np.zeros(shape)
            elif init == "ones":
                data = np.ones(shape)
            elif init == "embed":
                data = rng.normal(0.02, shape)
            else:
                fan_in, fan_out = shape
                data = xavier_uniform(rng, fan_in, fan_out, shape)
            params[name] = Tensor(data, name=name)
        return PolicyModel(kind, params)

    def fingerprint(self):
        import hashlib
        h = hashlib.blake2s(self.kind.encode())
        for name, _, _ in _specs(self.kind):
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def set_trainable(self, on):
        for p in self.params.values():
            p.requires_grad = on


def _block(params, prefix, x, mask):
    p = params
    B, L = x.shape[0], x.shape[1]
    h = ag.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    q = ag.add(ag.matmul(h, p[f"{prefix}.attn.Wq"]), p[f"{prefix}.attn.bq"])
    k = ag.add(ag.matmul(h, p[f"{prefix}.attn.Wk"]), p[f"{prefix}.attn.bk"])
    v = ag.add(ag.matmul(h, p[f"{prefix}.attn.Wv"]), p[f"{prefix}.attn.bv"])

    def heads(t):
        return ag.transpose(ag.reshape(t, (B, L, HEADS, HEAD_DIM)), (0, 2, 1, 3))

    q, k, v = heads(q), heads(k), heads(v)
    logits = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))),
                    1.0 / np.sqrt(HEAD_DIM))
    att = ag.softmax(ag.add(logits, mask), axis=-1)
    ctx = ag.reshape(ag.transpose(ag.matmul(att, v), (0, 2, 1, 3)), (B, L, WIDTH))
    ctx = ag.add(ag.matmul(ctx, p[f"{prefix}.attn.Wo"]), p[f"{prefix}.attn.bo"])
    x = ag.add(x, ctx)
    h = ag.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    m = ag.gelu(ag.add(ag.matmul(h, p[f"{prefix}.mlp.W1"]), p[f"{prefix}.mlp.b1"]))
    m = ag.add(ag.matmul(m, p[f"{prefix}.mlp.W2"]), p[f"{prefix}.mlp.b2"])
    return ag.add(x, m)


def _causal_mask(L):
    return np.where(np.tril(np.ones((L, L), dtype=bool)), 0.0, -1e9)


def _trunk(params, tokens, L):
    x = tokens
    for i in range(BLOCKS):
        x = _block(params, f"tb{i}", x, _causal_mask(L))
    return ag.layer_norm(x, params["lnf.g"], params["lnf.b"])


def arp_forward(model, obs_feats, returns, actions, timesteps):
    """Action logits per step and return predictions per step.

    obs_feats (B,T,96); returns (B,T) normalized; actions (B,T) indices with
    START_ACTION for unfilled slots; timesteps (B,T) absolute step indices.
    T must be at most the context length.
    """
    x, B, T = _arp_trunk(model, obs_feats, returns, actions, timesteps)
    p = model.params
    at_r = ag.take(x, (slice(None), slice(1, None, 3)))
    at_o = ag.take(x, (slice(None), slice(0, None, 3)))
    logits = ag.add(ag.matmul(at_r, p["ahead.W"]), p["ahead.b"])
    ret_pred = ag.reshape(ag.add(ag.matmul(at_o, p["rhead.W"]), p["rhead.b"]),
                          (B, T))
    return logits, ret_pred


def _arp_trunk(model, obs_feats, returns, actions, timesteps):
    if model.kind not in RETURN_KINDS:
        raise ValueError(f"arp_forward needs a return-conditioned kind, "
                         f"got {model.kind}")
    obs_feats = np.asarray(obs_feats, dtype=np.float64)
    B, T = obs_feats.shape[:2]
    if T > CONTEXT_K:
        raise ValueError(f"window of {T} steps exceeds context length {CONTEXT_K}")
    p = model.params
    time_tok = ag.embedding(p["time.tok"], np.asarray(timesteps, dtype=np.int64))
    o_tok = ag.add(ag.add(ag.matmul(ag.as_tensor(obs_feats), p["obs.W"]),
                          p["obs.b"]), time_tok)
    r_in = np.asarray(returns, dtype=np.float64)[..., None]
    r_tok = ag.add(ag.add(ag.matmul(ag.as_tensor(r_in), p["ret.W"]),
                          p["ret.b"]), time_tok)
    a_tok = ag.add(ag.embedding(p["act.tok"],
                                np.asarray(actions, dtype=np.int64)), time_tok)
    trip = [ag.reshape(t, (B, T, 1, WIDTH)) for t in (o_tok, r_tok, a_tok)]
    tokens = ag.reshape(ag.concat(trip, axis=2), (B, 3 * T, WIDTH))
    return _trunk(p, tokens, 3 * T), B, T


def arp_hidden(model, obs_feats, returns, actions, timesteps):
    """Trunk outputs at the action-prediction (R) positions, (B,T,64) ndarray."""
    x, _, _ = _arp_trunk(model, obs_feats, returns, actions, timesteps)
    return x.data[:, 1::3]


def arp_loss(model, obs_feats, returns, actions, timesteps, lam):
    """Mean action cross-entropy + lam * mean squared return error."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    logits, ret_pred = arp_forward(model, obs_feats, returns, actions, timesteps)
    B, T = ret_pred.shape
    targets = np.asarray(actions, dtype=np.int64).reshape(-1)
    ce = ag.cross_entropy(ag.reshape(logits, (B * T, N_ACTIONS)), targets)
    if lam == 0:
        return ce
    mse = ag.squared_error(ret_pred, np.asarray(returns, dtype=np.float64))
    return ag.add(ce, ag.mul(mse, lam))


def baseline_forward(model, obs_feats, cond, timesteps):
    """Action logits per step for bc_text / bc_goal.

    cond is the static conditioning embedding, (B, JOINT_DIM) or (JOINT_DIM,).
    """
    if model.kind in RETURN_KINDS:
        raise ValueError(f"baseline_forward got kind {model.kind}")
    obs_feats = np.asarray(obs_feats, dtype=np.float64)
    B, T = obs_feats.shape[:2]
    if T > CONTEXT_K:
        raise ValueError(f"window of {T} steps exceeds context length {CONTEXT_K}")
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim == 1:
        cond = np.broadcast_to(cond, (B, cond.size))
    cond = np.broadcast_to(cond[:, None, :], (B, T, cond.shape[-1]))
    p = model.params
    x = np.concatenate([obs_feats, cond], axis=-1)
    time_tok = ag.embedding(p["time.tok"], np.asarray(timesteps, dtype=np.int64))
    tokens = ag.add(ag.add(ag.matmul(ag.as_tensor(x), p["cond.W"]),
                           p["cond.b"]), time_tok)
    x = _trunk(p, tokens, T)
    return ag.add(ag.matmul(x, p["ahead.W"]), p["ahead.b"])


def baseline_loss(model, obs_feats, cond, actions, timesteps):
    logits = baseline_forward(model, obs_feats, cond, timesteps)
    B, T = logits.shape[:2]
    targets = np.asarray(actions, dtype=np.int64).reshape(-1)
    return ag.cross_entropy(ag.reshape(logits, (B * T, N_ACTIONS)), targets)


# -- training ------------------------------------------------------------


def _jitter_factors(augment):
    return (1.0, 0.92, 0.84) if augment else (1.0,)


def prepare_policy_data(labeled, bundle, augment=False, chunk=64):
    """Frozen observation features for every trajectory frame.

    With augmentation on, each trajectory gets one feature sequence per
    brightness factor, the factor held constant across the whole trajectory
    so windows stay aligned.
    """
    factors = _jitter_factors(augment)
    feats = []
    for lt in labeled:
        frames = rw.trajectory_frames(lt.base)
        variants = []
        for f in factors:
            fr = frames * f
            ms = [bundle.vision_multiscale(fr[lo:lo + chunk]).data
                  for lo in range(0, len(fr), chunk)]
            variants.append(np.concatenate(ms, axis=0))
        feats.append(variants)
    return feats


def _windows(labeled):
    wins = []
    for i, lt in enumerate(labeled):
        T = len(lt.base.actions)
        if T >= CONTEXT_K:
            wins += [(i, s, CONTEXT_K) for s in range(T - CONTEXT_K + 1)]
        elif T > 0:
            wins.append((i, 0, T))
    return wins


def train_policy(kind, labeled, bundle, *, lam=0.01, epochs=50, batch_size=64,
                 lr=5e-4, weight_decay=5e-5, augment=False, seed=0,
                 instruction=None, target_q=0.9, expect_fingerprint=True,
                 log=None):
    """Train a policy on return-labeled demos; returns (model, report)."""
    fp = bundle.fingerprint()
    if expect_fingerprint and labeled and labeled[0].encoder_fingerprint != fp:
        raise FingerprintMismatch(
            "labeled dataset was produced with a different encoder bundle")
    model = PolicyModel.new(kind, seed)
    feats = prepare_policy_data(labeled, bundle, augment=augment)
    cond = None
    if kind == "bc_text":
        instr = instruction if instruction is not None \
            else labeled[0].base.instruction
        cond = bundle.encode_text(instr)
    elif kind == "bc_goal":
        goals = [bundle.encode_image(goal_observation(lt.base.level))
                 for lt in labeled]
    wins = _windows(labeled)
    trainable = model.params
    model.set_trainable(True)
    opt = AdamW(trainable, lr=lr, weight_decay=weight_decay)
    rng = Rng(seed, stream_id=0x7A1)
    steps_per = max(1, len(wins) // batch_size)
    steps_total = epochs * steps_per
    warmup = min(max(1, int(steps_total * 0.05)), max(0, steps_total - 1))
    report = {"kind": kind, "lam": lam, "epochs": [],
              "bundle_fingerprint": fp}
    step = 0
    n_var = len(_jitter_factors(augment))
    for epoch in range(epochs):
        order = rng.permutation(len(wins))
        variant = rng.integers(n_var, size=len(wins))
        losses = []
        for b in range(steps_per):
            idx = order[b * batch_size:(b + 1) * batch_size]
            if len(idx) == 0:
                continue
            chosen = [wins[i] for i in idx]
            K = min(k for _, _, k in chosen)
            obs = np.stack([feats[i][variant[j]][s:s + K]
                            for j, (i, s, _) in zip(idx, chosen)])
            acts = np.stack([[wg.ACTIONS.index(a) for a in
                              labeled[i].base.actions[s:s + K]]
                             for i, s, _ in chosen])
            times = np.stack([np.arange(s, s + K) for _, s, _ in chosen])
            if kind in RETURN_KINDS:
                rets = np.stack([labeled[i].returns[s:s + K]
                                 for i, s, _ in chosen])
                loss = arp_loss(model, obs, rets, acts, times, lam)
            else:
                cmat = cond if kind == "bc_text" else \
                    np.stack([goals[i] for i, _, _ in chosen])
                loss = baseline_loss(model, obs, cmat, acts, times)
            grads = ag.backward(loss, trainable)
            clip_global_norm(grads, 1.0)
            opt.step(grads, lr=lr_schedule(step, steps_total, lr, warmup))
            step += 1
            losses.append(loss.item())
        report["epochs"].append({"epoch": epoch + 1,
                                 "loss": float(np.mean(losses))})
        if log:
            log(f"policy epoch {epoch + 1}/{epochs} loss {np.mean(losses):.4f}")
    model.set_trainable(False)
    model.meta = {"bundle_fingerprint": fp, "lam": lam, "augment": augment}
    if kind in RETURN_KINDS and labeled:
        stats = rw.ReturnStats([lt.returns[0] for lt in labeled])
        model.meta["norm_constant"] = labeled[0].norm_constant
        model.meta["target_q"] = target_q
        model.meta["target_return"] = stats.quantile(target_q)
    report["fingerprint"] = model.fingerprint()
    return model, report


# -- rollouts ------------------------------------------------------------


class EmbedCache:
    """Per-(level, cell) frozen embeddings; stuck agents revisit states often."""

    def __init__(self, bundle):
        self.bundle = bundle
        self._ms = {}
        self._joint = {}

    def _key(self, level, cell):
        return (level.task_id, level.split, level.level_seed, cell)

    def multiscale(self, level, cell):
        key = self._key(level, cell)
        if key not in self._ms:
            obs = wg.render(level, cell)
            ms = self.bundle.vision_multiscale(obs).data[0]
            self._ms[key] = (obs, ms)
        return self._ms[key]

    def joint(self, level, cell):
        key = self._key(level, cell)
        if key not in self._joint:
            self._joint[key] = self.bundle.encode_image(
                self.multiscale(level, cell)[0])
        return self._joint[key]


class RolloutRecord:
    def __init__(self):
        self.rewards = []
        self.remaining = []
        self.actions = []
        self.logits = []
        self.cells = []
        self.obs_feats = []     # frozen multi-scale features, for analysis
        self.times = []
        self.success = False
        self.steps = 0

    def hidden_states(self, model):
        """Per-step trunk outputs at the action position, replayed with the
        same sliding context the rollout used."""
        acts = [wg.ACTIONS.index(a) for a in self.actions]
        out = []
        for t in range(len(self.actions)):
            lo = max(0, t + 1 - CONTEXT_K)
            a_in = acts[lo:t] + [START_ACTION]
            h = arp_hidden(model, np.asarray(self.obs_feats[lo:t + 1])[None],
                           np.asarray(self.remaining[lo:t + 1])[None],
                           np.asarray(a_in)[None],
                           np.asarray(self.times[lo:t + 1])[None])
            out.append(h[0, -1])
        return np.asarray(out)


def rollout_arp(model, bundle, level, instruction, target_R, C, cache=None,
                goal_obs=None):
    """Greedy rollout with the recursive return update R_{t+1} = R_t - r_t."""
    if model.kind not in RETURN_KINDS:
        raise ValueError(f"rollout_arp needs arp_dt/gc_dt, got {model.kind}")
    if C is None or C <= 0:
        raise ValueError("rollout needs the training-time norm constant C")
    cache = cache or EmbedCache(bundle)
    if model.kind == "gc_dt":
        goal_emb = bundle.encode_image(goal_obs)
    else:
        txt = bundle.encode_text(instruction)
    obs_hist, ret_hist, act_hist, t_hist = [], [], [], []
    rec = RolloutRecord()
    state = wg.reset(level)
    R = float(target_R)
    while not state.done:
        _, ms = cache.multiscale(level, state.agent)
        img = cache.joint(level, state.agent)
        r = float(img @ (goal_emb if model.kind == "gc_dt" else txt)) / C
        obs_hist.append(ms)
        ret_hist.append(R)
        act_hist.append(START_ACTION)
        t_hist.append(min(state.t, TIME_SLOTS - 1))
        lo = max(0, len(obs_hist) - CONTEXT_K)
        logits, _ = arp_forward(
            model, np.asarray(obs_hist[lo:])[None],
            np.asarray(ret_hist[lo:])[None],
            np.asarray(act_hist[lo:])[None],
            np.asarray(t_hist[lo:])[None])
        step_logits = logits.data[0, -1]
        action = wg.ACTIONS[int(step_logits.argmax())]
        act_hist[-1] = wg.ACTIONS.index(action)
        rec.cells.append(state.agent)
        rec.rewards.append(r)
        rec.remaining.append(R)
        rec.actions.append(action)
        rec.logits.append(step_logits)
        rec.obs_feats.append(ms)
        rec.times.append(t_hist[-1])
        R = R - r
        state = wg.step(state, action)
    rec.success = state.succeeded
    rec.steps = state.t
    return rec


def rollout_baseline(model, bundle, level, instruction, cache=None,
                     goal_obs=None):
    """Greedy rollout for bc_text / bc_goal (no returns anywhere)."""
    if model.kind in RETURN_KINDS:
        raise ValueError(f"rollout_baseline got kind {model.kind}")
    if model.kind == "bc_goal":
        if goal_obs is None:
            raise ValueError("bc_goal rollout needs a goal observation")
        cond = bundle.encode_image(goal_obs)
    else:
        cond = bundle.encode_text(instruction)
    cache = cache or EmbedCache(bundle)
    obs_hist, t_hist = [], []
    rec = RolloutRecord()
    state = wg.reset(level)
    while not state.done:
        _, ms = cache.multiscale(level, state.agent)
        obs_hist.append(ms)
        t_hist.append(min(state.t, TIME_SLOTS - 1))
        lo = max(0, len(obs_hist) - CONTEXT_K)
        logits = baseline_forward(model, np.asarray(obs_hist[lo:])[None],
                                  cond, np.asarray(t_hist[lo:])[None])
        step_logits = logits.data[0, -1]
        action = wg.ACTIONS[int(step_logits.argmax())]
        rec.cells.append(state.agent)
        rec.actions.append(action)
        rec.logits.append(step_logits)
        state = wg.step(state, action)
    rec.success = state.succeeded
    rec.steps = state.t
    return rec


def goal_observation(level):
    """Render the level with the agent on the goal cell (bc_goal / gc_dt)."""
    goal = next(o for o in level.objects
                if wg.matches_predicate(o, level.goal_predicate))
    return wg.render(level, goal.cell)


# -- checkpoints ---------------------------------------------------------


def save_policy(model, path):
    save_params(path, model.params,
                {"policy_kind": model.kind, "meta": model.meta,
                 "fingerprint": model.fingerprint()})


def load_policy(path):
    params, header = load_params(path)
    model = PolicyModel(header["policy_kind"], params,
                        meta=header.get("meta", {}))
    if model.fingerprint() != header["fingerprint"]:
        raise ValueError(f"{path}: fingerprint mismatch, checkpoint corrupt")
    return model
