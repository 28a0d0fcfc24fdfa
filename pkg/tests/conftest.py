"""Session-scoped trained artifacts shared across the acceptance suite.

Contrastive pre-training is by far the most expensive stage, so it runs
once per configuration and is cached on disk (under the system temp dir,
keyed by a hash of the exact training configuration).  Re-running with
the same configuration reloads a byte-identical checkpoint; changing any
knob retrains from scratch.
"""

import hashlib
import json
import tempfile
import time
from pathlib import Path

import pytest

from rcgrid import encoder as enc
from rcgrid import expert, finetune

PRETRAIN_CFG = {
    "pairs": 2048,
    "epochs": 200,
    "lr": 3e-3,
    "batch_size": 32,
    "seed": 0,
    "alpha": 0.5,
}

FT_CFG = {
    "task": "corridor",
    "n_demos": 100,
    "demo_seed": 0,
    "beta": 1.5,
    "epochs": 5,
    "lr": 3e-4,
    "seed": 0,
}

# wall-clock seconds spent fine-tuning, per task; criterion 4 counts this
# toward its runtime budget (cache hits reuse the recorded time)
FT_TIME = {}


def _cache_path(stage, cfg):
    key = hashlib.blake2s(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
    return Path(tempfile.gettempdir()) / f"rcgrid-accept-{stage}-{key}.bin"


@pytest.fixture(scope="session")
def pretrained_bundle():
    path = _cache_path("pretrain", PRETRAIN_CFG)
    if path.exists():
        bundle, _ = enc.load_bundle(path)
        return bundle
    c = PRETRAIN_CFG
    bundle = enc.EncoderBundle.new(c["seed"], alpha=c["alpha"])
    pairs = enc.build_caption_corpus(c["pairs"], c["seed"])
    bundle, _ = enc.pretrain_contrastive(
        bundle, pairs, epochs=c["epochs"], lr=c["lr"],
        batch_size=c["batch_size"], seed=c["seed"])
    enc.save_bundle(bundle, path, extra={"stage": "pretrained"})
    return bundle


def _demos(task, split, n, seed):
    return expert.generate_demos(task, split, n, seed)


@pytest.fixture(scope="session")
def corridor_demos():
    return _demos(FT_CFG["task"], "train", FT_CFG["n_demos"],
                  FT_CFG["demo_seed"])


def _finetuned(pretrained, demos, task):
    cfg = {**PRETRAIN_CFG, **FT_CFG, "ft_task": task}
    path = _cache_path("ft", cfg)
    if path.exists():
        bundle, meta = enc.load_bundle(path)
        FT_TIME[task] = float(meta.get("elapsed", 0.0))
        return bundle
    t0 = time.time()
    bundle, _ = finetune.finetune(pretrained, demos, beta=FT_CFG["beta"],
                                  epochs=FT_CFG["epochs"],
                                  lr=FT_CFG["lr"], seed=FT_CFG["seed"])
    FT_TIME[task] = time.time() - t0
    enc.save_bundle(bundle, path, extra={"stage": "finetuned",
                                         "elapsed": FT_TIME[task]})
    return bundle


@pytest.fixture(scope="session")
def finetuned_bundle(pretrained_bundle, corridor_demos):
    return _finetuned(pretrained_bundle, corridor_demos, "corridor")


@pytest.fixture(scope="session")
def bluegem_demos():
    return _demos("corridor_bluegem", "train", FT_CFG["n_demos"],
                  FT_CFG["demo_seed"])


@pytest.fixture(scope="session")
def bluegem_bundle(pretrained_bundle, bluegem_demos):
    return _finetuned(pretrained_bundle, bluegem_demos, "corridor_bluegem")


@pytest.fixture(scope="session")
def shared_results():
    """Cross-test scoreboard: expensive results posted by one acceptance
    criterion and reused by later ones (e.g. policy success rates)."""
    return {}
