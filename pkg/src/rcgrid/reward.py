"""Multimodal rewards, return labeling, and target-return statistics.

The reward for a frame is the cosine similarity between the observation's
joint embedding and the instruction's joint embedding; returns are discounted
suffix sums of rewards, normalized by a data-derived constant so they stay in
[-1, 1] for the sequence policy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import expert
from . import worldgrid as wg

LABELED_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LabeledTrajectory:
    base: expert.Trajectory
    rewards: tuple          # r_0 .. r_T, one per frame
    returns: tuple          # normalized R_t / C
    norm_constant: float
    encoder_fingerprint: str
    gamma: float = 1.0

    def to_record(self):
        rec = self.base.to_record()
        rec["rewards"] = list(self.rewards)
        rec["returns"] = list(self.returns)
        return rec

    @staticmethod
    def from_record(rec, meta):
        return LabeledTrajectory(
            base=expert.Trajectory.from_record(rec),
            rewards=tuple(rec["rewards"]),
            returns=tuple(rec["returns"]),
            norm_constant=meta["norm_constant"],
            encoder_fingerprint=meta["encoder_fingerprint"],
            gamma=meta["gamma"],
        )


class ReturnStats:
    """Sorted normalized initial returns with a nearest-rank quantile."""

    def __init__(self, initial_returns):
        vals = sorted(float(v) for v in initial_returns)
        if not vals:
            raise ValueError("empty return statistics")
        self.values = vals

    def quantile(self, q):
        if not 0.0 < q <= 1.0:
            raise ValueError(f"quantile level must be in (0, 1], got {q}")
        rank = math.ceil(q * len(self.values))
        return self.values[rank - 1]


def multimodal_reward(bundle, observation, instruction):
    """Cosine similarity of the observation and instruction joint embeddings."""
    img = bundle.encode_image(observation)
    txt = bundle.encode_text(instruction)
    return float(img @ txt)


def goal_image_reward(bundle, observation, goal_observation):
    a = bundle.encode_image(observation)
    b = bundle.encode_image(goal_observation)
    return float(a @ b)


def trajectory_frames(traj):
    """All rendered observations along a trajectory, (T+1, 78, 78, 3)."""
    states = expert.replay(traj)
    return np.stack([wg.render(traj.level, s.agent) for s in states])


def trajectory_rewards(bundle, traj, instruction=None):
    frames = trajectory_frames(traj)
    txt = bundle.encode_text(instruction if instruction is not None
                             else traj.instruction)
    return bundle.encode_image(frames) @ txt


def suffix_returns(rewards, gamma):
    """R_t = r_t + gamma * R_{t+1}, accumulated right to left."""
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def default_norm_constant(initial_returns):
    """C = max(1, ceil(max |R_0|)); keeps normalized returns in [-1, 1]."""
    peak = max(abs(float(v)) for v in initial_returns)
    return float(max(1, math.ceil(peak)))


def label_returns(dataset, bundle, instruction=None, gamma=1.0, C=None):
    """Return-label every trajectory in a demo dataset.

    Returns (labeled trajectory list, ReturnStats over normalized R_0, meta).
    When C is None it is derived from this dataset's initial returns.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    fingerprint = bundle.fingerprint()
    raw = []
    for traj in dataset.records:
        rewards = trajectory_rewards(bundle, traj, instruction)
        raw.append((traj, rewards, suffix_returns(rewards, gamma)))
    if C is None:
        C = default_norm_constant([ret[0] for _, _, ret in raw])
    if C <= 0:
        raise ValueError(f"norm constant must be positive, got {C}")
    labeled = [
        LabeledTrajectory(base=traj, rewards=tuple(map(float, rewards)),
                          returns=tuple(float(v) for v in returns / C),
                          norm_constant=float(C),
                          encoder_fingerprint=fingerprint, gamma=float(gamma))
        for traj, rewards, returns in raw
    ]
    stats = ReturnStats([lt.returns[0] for lt in labeled])
    meta = dict(dataset.meta)
    meta.update({
        "labeled_schema_version": LABELED_SCHEMA_VERSION,
        "norm_constant": float(C),
        "gamma": float(gamma),
        "encoder_fingerprint": fingerprint,
    })
    return labeled, stats, meta


def target_return(stats, q=0.9):
    return stats.quantile(q)


@dataclass
class LabeledDataset:
    records: list           # LabeledTrajectory
    meta: dict

    def __len__(self):
        return len(self.records)

    def stats(self):
        return ReturnStats([lt.returns[0] for lt in self.records])


def save_labeled(path, labeled, meta):
    fps = {lt.encoder_fingerprint for lt in labeled}
    if len(fps) > 1:
        raise ValueError("mixed encoder fingerprints in one labeled dataset")
    with open(path, "w") as f:
        f.write(json.dumps(meta, sort_keys=True) + "\n")
        for lt in labeled:
            f.write(json.dumps(lt.to_record(), sort_keys=True) + "\n")


def load_labeled(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise expert.DatasetFormatError(f"{path}: empty file")
    meta = json.loads(lines[0])
    if meta.get("labeled_schema_version") != LABELED_SCHEMA_VERSION:
        raise expert.DatasetFormatError(
            f"{path}: unsupported labeled schema "
            f"{meta.get('labeled_schema_version')!r}")
    records = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            records.append(LabeledTrajectory.from_record(json.loads(line), meta))
        except (ValueError, KeyError) as e:
            raise expert.DatasetFormatError(f"{path}: bad record on line {i}: {e}")
    return LabeledDataset(records=records, meta=meta)
