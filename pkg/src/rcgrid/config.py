"""Run configuration: defaults, file loading, canonical hashing."""

from __future__ import annotations

import hashlib
import json

DEFAULTS = {
    # task / data
    "task": "corridor",
    "split": "train",
    "seed": 0,
    "n_demos": 500,
    # encoder pre-training
    "pretrain_pairs": 5000,
    "pretrain_epochs": 10,
    "pretrain_lr": 3e-3,
    "pretrain_batch": 32,
    "temperature": 0.07,
    "alpha": 0.5,
    # fine-tuning
    "vip": True,
    "idm": True,
    "beta": 1.5,
    "gamma_ft": 0.98,
    "ft_epochs": 20,
    "ft_lr": 1e-4,
    "ft_weight_decay": 1e-3,
    "ft_batch": 64,
    "val_split": 0.1,
    # return labeling
    "gamma": 1.0,
    "norm_constant": None,
    # policy
    "kind": "arp_dt",
    "lam": 0.01,
    "context_k": 4,
    "policy_epochs": 50,
    "policy_lr": 5e-4,
    "policy_weight_decay": 5e-5,
    "policy_batch": 64,
    "augment": False,
    # evaluation
    "episodes": 100,
    "quantile": 0.9,
    "cycle_levels": 10,
    "threads": 1,
    # ablation
    "grid": "vip_idm",
}


class ConfigError(ValueError):
    pass


def resolve(file_values=None, overrides=None):
    """defaults < config file < explicit flags; unknown keys rejected."""
    cfg = dict(DEFAULTS)
    for name, values in (("config file", file_values), ("flags", overrides)):
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r} in {name}")
            cfg[k] = v
    return cfg


def canonical(cfg):
    """Sorted-key JSON with fixed float formatting; the hashable identity."""
    def norm(v):
        if isinstance(v, float):
            return float(repr(v))
        return v
    return json.dumps({k: norm(v) for k, v in sorted(cfg.items())},
                      sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return hashlib.blake2s(canonical(cfg).encode()).hexdigest()[:16]


def load_file(path):
    """Flat key = value lines; '#' comments; JSON-typed values."""
    values = {}
    try:
        text = open(path).read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            values[k] = json.loads(v)
        except json.JSONDecodeError:
            values[k] = v
    return values


def save_snapshot(path, cfg):
    with open(path, "w") as f:
        for k, v in sorted(cfg.items()):
            f.write(f"{k} = {json.dumps(v)}\n")


def snapshot_for(artifact_path):
    from pathlib import Path
    p = Path(artifact_path)
    return p.with_name(p.name + ".config")
