"""Desk-scale multimodal encoder pair with contrastive pre-training.

A tiny vision transformer (6x6 tile patches, 2 blocks, width 32) and a text
transformer share a 32-d joint space. Multi-scale features concatenate the
mean-pooled input embedding with each block's pooled output (3 * 32 = 96).
Small residual adapters sit between the multi-scale features and the joint
projection; they are identity-initialized (zero final layer) and are the only
encoder parameters updated during fine-tuning.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .optim import AdamW, clip_global_norm
from .rng import Rng, xavier_uniform
from . import worldgrid as wg

WIDTH = 32
HEADS = 4
HEAD_DIM = WIDTH // HEADS
BLOCKS = 2
MLP_HIDDEN = 64
JOINT_DIM = 32
MS_DIM = (BLOCKS + 1) * WIDTH  # 96
ADAPTER_HIDDEN = 64
PATCHES = wg.GRID * wg.GRID  # 169
PATCH_DIM = wg.TILE * wg.TILE * 3  # 108

CHECKPOINT_MAGIC = "rcgrid-params-v1"


class PixelRangeError(ValueError):
    pass


def _tower_param_specs(prefix, n_tokens, in_dim=None, vocab=None):
    specs = []
    if vocab is not None:
        specs.append((f"{prefix}.tok", (vocab, WIDTH), "embed"))
    else:
        specs.append((f"{prefix}.patch.W", (in_dim, WIDTH), "xavier"))
        specs.append((f"{prefix}.patch.b", (WIDTH,), "zeros"))
    specs.append((f"{prefix}.pos", (n_tokens, WIDTH), "embed"))
    for i in range(BLOCKS):
        b = f"{prefix}.b{i}"
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
    return specs


def _adapter_param_specs(prefix):
    return [
        (f"{prefix}.W1", (MS_DIM, ADAPTER_HIDDEN), "xavier"),
        (f"{prefix}.b1", (ADAPTER_HIDDEN,), "zeros"),
        (f"{prefix}.W2", (ADAPTER_HIDDEN, MS_DIM), "zeros"),  # identity init
        (f"{prefix}.b2", (MS_DIM,), "zeros"),
    ]


def _param_specs():
    specs = _tower_param_specs("vis", PATCHES, in_dim=PATCH_DIM)
    specs += _tower_param_specs("txt", wg.TOKEN_LEN, vocab=len(wg.VOCAB))
    specs += _adapter_param_specs("vad")
    specs += _adapter_param_specs("tad")
    specs += [("vis.proj", (MS_DIM, JOINT_DIM), "xavier"),
              ("txt.proj", (MS_DIM, JOINT_DIM), "xavier")]
    return specs


def init_params(seed):
    rng = Rng(seed, stream_id=0xE0C0DE)
    params = {}
    for name, shape, kind in _param_specs():
        if kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        elif kind == "embed":
            data = rng.normal(0.02, shape)
        else:
            fan_in, fan_out = shape if len(shape) == 2 else (shape[0], shape[0])
            data = xavier_uniform(rng, fan_in, fan_out, shape)
        params[name] = Tensor(data, name=name)
    return params


class EncoderBundle:
    """Vision/text towers + adapters + joint projections, with a fingerprint."""

    def __init__(self, params, alpha=0.5):
        self.params = params
        self.alpha = float(alpha)

    @staticmethod
    def new(seed, alpha=0.5):
        return EncoderBundle(init_params(seed), alpha=alpha)

    def fingerprint(self):
        h = hashlib.blake2s()
        h.update(struct.pack("<d", self.alpha))
        for name, _, _ in _param_specs():
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def adapter_params(self):
        """Exactly the vision/text adapter parameters (disjoint from towers)."""
        return {k: v for k, v in self.params.items()
                if k.startswith("vad.") or k.startswith("tad.")}

    def tower_params(self):
        return {k: v for k, v in self.params.items()
                if k.startswith("vis.") or k.startswith("txt.")}

    def set_trainable(self, names):
        for k, p in self.params.items():
            p.requires_grad = k in names

    # -- forward pieces -------------------------------------------------

    def _block(self, prefix, x, n_tokens):
        p = self.params
        h = ag.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        q = ag.add(ag.matmul(h, p[f"{prefix}.attn.Wq"]), p[f"{prefix}.attn.bq"])
        k = ag.add(ag.matmul(h, p[f"{prefix}.attn.Wk"]), p[f"{prefix}.attn.bk"])
        v = ag.add(ag.matmul(h, p[f"{prefix}.attn.Wv"]), p[f"{prefix}.attn.bv"])
        B = x.shape[0]
        def heads(t):
            return ag.transpose(ag.reshape(t, (B, n_tokens, HEADS, HEAD_DIM)),
                                (0, 2, 1, 3))
        q, k, v = heads(q), heads(k), heads(v)
        att = ag.softmax(ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))),
                                1.0 / np.sqrt(HEAD_DIM)), axis=-1)
        ctx = ag.reshape(ag.transpose(ag.matmul(att, v), (0, 2, 1, 3)),
                         (B, n_tokens, WIDTH))
        ctx = ag.add(ag.matmul(ctx, p[f"{prefix}.attn.Wo"]), p[f"{prefix}.attn.bo"])
        x = ag.add(x, ctx)
        h = ag.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        m = ag.gelu(ag.add(ag.matmul(h, p[f"{prefix}.mlp.W1"]), p[f"{prefix}.mlp.b1"]))
        m = ag.add(ag.matmul(m, p[f"{prefix}.mlp.W2"]), p[f"{prefix}.mlp.b2"])
        return ag.add(x, m)

    def _tower(self, prefix, tokens, n_tokens):
        pools = [ag.tmean(tokens, axis=1)]
        x = tokens
        for i in range(BLOCKS):
            x = self._block(f"{prefix}.b{i}", x, n_tokens)
            pools.append(ag.tmean(x, axis=1))
        return ag.concat(pools, axis=-1)  # (B, MS_DIM)

    def vision_multiscale(self, obs_batch):
        """Multi-scale vision features, (B, 96) Tensor, for a (B,78,78,3) batch."""
        obs = np.asarray(obs_batch, dtype=np.float64)
        single = obs.ndim == 3
        if single:
            obs = obs[None]
        if obs.shape[1:] != (wg.OBS_SIZE, wg.OBS_SIZE, 3):
            raise ValueError(f"bad observation shape {obs.shape}")
        if obs.min() < 0.0 or obs.max() > 1.0:
            raise PixelRangeError(
                f"pixels outside [0,1]: min {obs.min():.4f} max {obs.max():.4f}")
        patches = (obs.reshape(-1, wg.GRID, wg.TILE, wg.GRID, wg.TILE, 3)
                      .transpose(0, 1, 3, 2, 4, 5)
                      .reshape(-1, PATCHES, PATCH_DIM))
        p = self.params
        tokens = ag.add(ag.add(ag.matmul(Tensor(patches), p["vis.patch.W"]),
                               p["vis.patch.b"]), p["vis.pos"])
        return self._tower("vis", tokens, PATCHES)

    def text_multiscale(self, token_ids_batch):
        ids = np.asarray(token_ids_batch, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        p = self.params
        tokens = ag.add(ag.embedding(p["txt.tok"], ids), p["txt.pos"])
        return self._tower("txt", tokens, wg.TOKEN_LEN)

    def _adapt(self, prefix, ms):
        p = self.params
        h = ag.gelu(ag.add(ag.matmul(ms, p[f"{prefix}.W1"]), p[f"{prefix}.b1"]))
        out = ag.add(ag.matmul(h, p[f"{prefix}.W2"]), p[f"{prefix}.b2"])
        return ag.add(ag.mul(out, self.alpha), ag.mul(ms, 1.0 - self.alpha))

    def joint_image(self, ms):
        """Blend through the vision adapter, project, L2-normalize."""
        blended = self._adapt("vad", ms) if self.alpha != 0.0 else ms
        return ag.l2_normalize(ag.matmul(blended, self.params["vis.proj"]))

    def joint_text(self, ms):
        blended = self._adapt("tad", ms) if self.alpha != 0.0 else ms
        return ag.l2_normalize(ag.matmul(blended, self.params["txt.proj"]))

    # -- public encode API (no-grad numpy results) ----------------------

    def encode_image(self, observation):
        out = self.joint_image(self.vision_multiscale(observation)).data
        return out[0] if np.asarray(observation).ndim == 3 else out

    def encode_text(self, instruction):
        ids = instruction.token_ids if isinstance(instruction, wg.Instruction) \
            else instruction
        out = self.joint_text(self.text_multiscale(ids)).data
        return out[0] if np.asarray(ids, dtype=np.int64).ndim == 1 else out


# -- contrastive pre-training -------------------------------------------


def clip_loss(bundle, obs_batch, ids_batch, temperature):
    """Symmetric cross-entropy over in-batch similarity logits."""
    n = len(obs_batch)
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 pairs per batch")
    img = bundle.joint_image(bundle.vision_multiscale(obs_batch))
    txt = bundle.joint_text(bundle.text_multiscale(ids_batch))
    logits = ag.mul(ag.matmul(img, ag.transpose(txt, (1, 0))), 1.0 / temperature)
    labels = np.arange(n)
    loss_i = ag.cross_entropy(logits, labels)
    loss_t = ag.cross_entropy(ag.transpose(logits, (1, 0)), labels)
    return ag.mul(ag.add(loss_i, loss_t), 0.5)


def pretrain_contrastive(bundle, pairs, epochs=10, temperature=0.07,
                         batch_size=64, lr=1e-3, weight_decay=1e-4, seed=0,
                         log=None):
    """Train towers and projections on (observation, caption) pairs.

    Adapters stay identity-initialized and frozen during this stage.
    Returns (bundle, per-epoch mean loss list).
    """
    obs = np.stack([p[0] for p in pairs])
    ids = np.stack([np.asarray(wg.tokenize(p[1]) if isinstance(p[1], str)
                               else p[1]) for p in pairs])
    # group pairs by caption so a batch never contains the same caption
    # twice: in-batch duplicates would be false negatives that punish the
    # model for matching a correct caption and corrupt the training signal
    groups = {}
    for i, row in enumerate(ids):
        groups.setdefault(tuple(row), []).append(i)
    groups = [np.asarray(g) for _, g in sorted(groups.items())]
    trainable = {k: v for k, v in bundle.tower_params().items()}
    trainable["vis.proj"] = bundle.params["vis.proj"]
    trainable["txt.proj"] = bundle.params["txt.proj"]
    bundle.set_trainable(set(trainable))
    opt = AdamW(trainable, lr=lr, betas=(0.9, 0.999), weight_decay=weight_decay)
    rng = Rng(seed, stream_id=0xC11B)
    n = len(groups)
    steps_total = max(1, epochs * ((n + batch_size - 1) // batch_size))
    step = 0
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n - 1, batch_size):
            idx = np.array([groups[g][rng.integers(len(groups[g]))]
                            for g in order[lo:lo + batch_size]])
            if len(idx) < 2:
                continue
            loss = clip_loss(bundle, obs[idx], ids[idx], temperature)
            grads = ag.backward(loss, trainable)
            clip_global_norm(grads, 1.0)
            opt.step(grads, lr=_warmup_cosine(step, steps_total, lr))
            step += 1
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if log:
            log(f"pretrain epoch {epoch + 1}/{epochs} loss {history[-1]:.4f}")
    bundle.set_trainable(set())
    return bundle, history


def _warmup_cosine(step, total, base_lr, warmup_frac=0.05):
    from .optim import lr_schedule
    warmup = min(max(1, int(total * warmup_frac)), max(0, total - 1))
    return lr_schedule(min(step, total), total, base_lr, warmup)


def retrieval_top1(bundle, pairs):
    """In-batch top-1 image->caption retrieval accuracy."""
    obs = np.stack([p[0] for p in pairs])
    ids = np.stack([np.asarray(wg.tokenize(p[1]) if isinstance(p[1], str)
                               else p[1]) for p in pairs])
    img = bundle.joint_image(bundle.vision_multiscale(obs)).data
    txt = bundle.joint_text(bundle.text_multiscale(ids)).data
    sims = img @ txt.T
    return float((sims.argmax(axis=1) == np.arange(len(pairs))).mean())


def build_caption_corpus(n_pairs, seed, tasks=wg.TASKS):
    """(observation, caption) pairs sampled across tasks, splits, and positions.

    Agent positions are sampled off the start cell so captions cover the full
    relative-position vocabulary, including on-goal frames.
    """
    rng = Rng(seed, stream_id=0xCA9)
    pairs = []
    i = 0
    while len(pairs) < n_pairs:
        task = tasks[int(rng.integers(len(tasks)))]
        split = ("train", "test")[int(rng.integers(2))]
        level = wg.make_level(task, split, 50_000 + i)
        i += 1
        cells = wg.free_cells(level.walls)
        cell = cells[int(rng.integers(len(cells)))]
        if int(rng.integers(10)) == 0:  # sometimes stand on an object
            objs = level.objects
            cell = objs[int(rng.integers(len(objs)))].cell
        obs = wg.render(level, cell)
        pairs.append((obs, wg.caption_for(level, cell)))
    return pairs


# -- checkpoints --------------------------------------------------------


def save_params(path, params, header_extra):
    """Binary checkpoint: JSON header line + flat float64 parameter block."""
    names = list(params)
    header = {
        "magic": CHECKPOINT_MAGIC,
        "names": names,
        "shapes": {k: list(params[k].shape) for k in names},
    }
    header.update(header_extra)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for k in names:
            f.write(np.ascontiguousarray(params[k].data).tobytes())


def load_params(path):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        params = {}
        for k in header["names"]:
            shape = tuple(header["shapes"][k])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(n * 8)
            if len(buf) != n * 8:
                raise ValueError(f"{path}: truncated parameter block at {k}")
            params[k] = Tensor(np.frombuffer(buf, dtype=np.float64).reshape(shape).copy(),
                               name=k)
    return params, header


def save_bundle(bundle, path, extra=None):
    header = {"alpha": bundle.alpha, "fingerprint": bundle.fingerprint()}
    if extra:
        header.update(extra)
    save_params(path, bundle.params, header)


def load_bundle(path):
    params, header = load_params(path)
    bundle = EncoderBundle(params, alpha=header["alpha"])
    if bundle.fingerprint() != header["fingerprint"]:
        raise ValueError(f"{path}: fingerprint mismatch, checkpoint corrupt")
    return bundle, header
