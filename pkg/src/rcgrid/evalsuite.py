"""Evaluation: success rates, cycle consistency, reward curves, ablations."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from . import expert, finetune, policy
from . import reward as rw
from . import worldgrid as wg

EVAL_SEED_BASE = 1 << 24   # keeps evaluation level seeds off the demo range

RANDOM_TEXT = ("NeurIPS 2023 will be held again at the New Orleans "
               "Ernest N. Morial Convention Center")


@dataclass
class EvalReport:
    task: str
    split: str
    episodes: int
    success_rate: float
    expert_normalized: float
    outcomes: list
    seed: int
    policy_fingerprint: str
    bundle_fingerprint: str

    def to_dict(self):
        return dict(self.__dict__)


def _episode_seeds(seed, n):
    return [EVAL_SEED_BASE + (int(seed) << 12) + i for i in range(n)]


def _run_episode(model, bundle, level, instruction, override_text=None):
    instr = (wg.Instruction.from_text(override_text)
             if override_text is not None else instruction)
    if model == "expert":
        try:
            actions = expert.solve(level)
        except expert.UnsolvableLevel:
            return None, False
        traj = expert.Trajectory(level=level, instruction=instr,
                                 actions=actions, success=True)
        final = expert.replay(traj)[-1]
        return None, bool(final.succeeded)
    if model.kind in policy.RETURN_KINDS:
        goal = policy.goal_observation(level) if model.kind == "gc_dt" else None
        rec = policy.rollout_arp(
            model, bundle, level, instr,
            target_R=model.meta["target_return"],
            C=model.meta["norm_constant"], goal_obs=goal)
    else:
        goal = policy.goal_observation(level) if model.kind == "bc_goal" else None
        rec = policy.rollout_baseline(model, bundle, level, instr,
                                      goal_obs=goal)
    return rec, rec.success


def evaluate(model, bundle, task, split, n_episodes, seed, threads=1,
             override_text=None, keep_records=False):
    """Success rate over n distinct unseen levels; deterministic in seed."""
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    if model != "expert" and model.meta.get("bundle_fingerprint") not in (
            None, bundle.fingerprint()):
        raise policy.FingerprintMismatch(
            "policy was trained against a different encoder bundle")
    instruction = wg.instruction_for(task, split)
    levels = [wg.make_level(task, split, s)
              for s in _episode_seeds(seed, n_episodes)]

    def run(level):
        return _run_episode(model, bundle, level, instruction, override_text)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, levels))
    else:
        results = [run(level) for level in levels]
    outcomes = [bool(ok) for _, ok in results]
    rate = float(np.mean(outcomes))
    report = EvalReport(
        task=task, split=split, episodes=n_episodes, success_rate=rate,
        expert_normalized=rate / 1.0, outcomes=outcomes, seed=int(seed),
        policy_fingerprint="expert" if model == "expert" else model.fingerprint(),
        bundle_fingerprint=bundle.fingerprint() if bundle is not None else "",
    )
    if keep_records:
        return report, [rec for rec, _ in results], levels
    return report


# -- cycle consistency ---------------------------------------------------


def cycle_consistency(H1, H2):
    """Share of indices whose nearest-neighbor round trip lands within 1.

    Nearest neighbors under L2; ties broken by lowest index.
    """
    H1 = np.atleast_2d(np.asarray(H1, dtype=np.float64).T).T \
        if np.asarray(H1).ndim == 1 else np.asarray(H1, dtype=np.float64)
    H2 = np.atleast_2d(np.asarray(H2, dtype=np.float64).T).T \
        if np.asarray(H2).ndim == 1 else np.asarray(H2, dtype=np.float64)
    if len(H1) != len(H2):
        raise ValueError(f"length mismatch: {len(H1)} vs {len(H2)}")
    if len(H1) == 0:
        raise ValueError("empty sequences")
    d12 = np.linalg.norm(H1[:, None] - H2[None], axis=-1)
    ok = 0
    for i in range(len(H1)):
        j = int(d12[i].argmin())
        k = int(d12[:, j].argmin())
        if abs(i - k) <= 1:
            ok += 1
    return 100.0 * ok / len(H1)


@dataclass
class CycleReport:
    pair_type: str
    window: int
    percentage: float
    pairs: list = field(default_factory=list)
    truncated: bool = False
    insufficient: bool = False


def _last_window(H, n=10):
    return np.asarray(H[-n:])


def cycle_suite(model, bundle, task, split, n_levels, seed, threads=1):
    """Cycle consistency over (succ,succ), (fail,fail), (succ,fail)
    trajectory pairs harvested from the policy's own rollouts."""
    report, records, levels = evaluate(model, bundle, task, split,
                                       max(n_levels * 4, 20), seed,
                                       threads=threads, keep_records=True)
    succ, fail = [], []
    for rec, level in zip(records, levels):
        if not rec.actions:
            continue
        entry = (level.level_seed, rec.hidden_states(model))
        (succ if rec.success else fail).append(entry)
    succ, fail = succ[:n_levels], fail[:n_levels]
    out = []

    def pct(pairs):
        vals = []
        detail = []
        truncated = False
        for (sa, Ha), (sb, Hb) in pairs:
            n = min(len(Ha), len(Hb), 10)
            if n < min(len(Ha), 10) or n < min(len(Hb), 10):
                truncated = True
            v = cycle_consistency(_last_window(Ha, n), _last_window(Hb, n))
            vals.append(v)
            detail.append({"seeds": [sa, sb], "pct": v})
        return vals, detail, truncated

    specs = [("succ_succ", [(succ[i], succ[j]) for i in range(len(succ))
                            for j in range(i + 1, len(succ))]),
             ("fail_fail", [(fail[i], fail[j]) for i in range(len(fail))
                            for j in range(i + 1, len(fail))]),
             ("succ_fail", [(s, f) for s in succ for f in fail])]
    for name, pairs in specs:
        vals, detail, truncated = pct(pairs)
        out.append(CycleReport(
            pair_type=name, window=10,
            percentage=float(np.mean(vals)) if vals else float("nan"),
            pairs=detail, truncated=truncated,
            insufficient=not vals))
    return out


# -- correlation and curves ----------------------------------------------


def spearman(xs, ys):
    """Rank correlation with average ranks; None when undefined."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if len(xs) != len(ys):
        raise ValueError("length mismatch")
    if len(xs) < 2:
        raise ValueError("need at least 2 points")
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        return None
    return float(scipy.stats.spearmanr(xs, ys).statistic)


def export_reward_curves(bundle, dataset, instruction=None, path=None,
                         gamma=1.0, C=None):
    """Per-step reward / remaining-return CSV for a demo dataset."""
    labeled, _, _ = rw.label_returns(dataset, bundle, instruction=instruction,
                                     gamma=gamma, C=C)
    rows = [("trajectory_id", "t", "reward", "normalized_remaining_return")]
    for i, lt in enumerate(labeled):
        for t, (r, R) in enumerate(zip(lt.rewards, lt.returns)):
            rows.append((i, t, repr(float(r)), repr(float(R))))
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(rows)
    return len(rows) - 1


# -- ablation grid -------------------------------------------------------


def _pipeline_cell(cell, base, pretrained_bundle):
    """One ablation cell: (optionally) fine-tune, label, train, evaluate."""
    from .encoder import EncoderBundle
    cfg = {**base, **cell}
    task = cfg["task"]
    seed = cfg.get("seed", 0)
    bundle = pretrained_bundle if cfg.get("pretrain", True) \
        else EncoderBundle.new(seed + 17)
    if cfg.get("finetune", True) and (cfg.get("vip", True)
                                      or cfg.get("idm", True)):
        beta = cfg.get("beta", 1.5) if cfg.get("idm", True) else 0.0
        bundle, _ = finetune.finetune(
            bundle, cfg["demos"], beta=beta, use_vip=cfg.get("vip", True),
            epochs=cfg.get("ft_epochs", 5), seed=seed)
    text = RANDOM_TEXT if cfg.get("text") == "random" else None
    instr = wg.Instruction.from_text(text) if text else None
    labeled, _, _ = rw.label_returns(cfg["demos"], bundle, instruction=instr)
    lam = cfg.get("lam", 0.01)
    if not cfg.get("return_pred", True):
        lam = 0.0
    model, _ = policy.train_policy(
        cfg.get("kind", "arp_dt"), labeled, bundle, lam=lam,
        epochs=cfg.get("policy_epochs", 20),
        batch_size=cfg.get("batch_size", 64),
        augment=cfg.get("augment", False), seed=seed)
    return evaluate(model, bundle, task, cfg.get("eval_split", "test"),
                    cfg.get("episodes", 20), seed,
                    threads=cfg.get("threads", 1), override_text=text)


def run_ablation(cells, base, pretrained_bundle, log=None):
    """Run the pipeline once per grid cell; failures recorded, grid continues.

    Returns a list of row dicts (cell spec + success rate or error).
    """
    rows = []
    for cell in cells:
        row = dict(cell)
        try:
            report = _pipeline_cell(cell, base, pretrained_bundle)
            row["success_rate"] = report.success_rate
            row["episodes"] = report.episodes
        except Exception as e:      # cell failure must not kill the grid
            row["error"] = f"{type(e).__name__}: {e}"
        rows.append(row)
        if log:
            log(f"ablation cell {cell} -> "
                f"{row.get('success_rate', row.get('error'))}")
    return rows


def vip_idm_grid():
    return [{"vip": v, "idm": d} for v in (True, False) for d in (True, False)]


def lambda_sweep(values=(0.001, 0.01, 0.1, 1.0)):
    return [{"lam": v} for v in values]


def return_pred_toggle():
    return [{"return_pred": True}, {"return_pred": False}]


def text_control():
    return [{"text": "instructive"}, {"text": "random"}]


def save_table(path, rows):
    keys = sorted({k for r in rows for k in r})
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def save_report(path, report):
    with open(path, "w") as f:
        json.dump(report.to_dict() if hasattr(report, "to_dict") else report,
                  f, indent=2, sort_keys=True)
