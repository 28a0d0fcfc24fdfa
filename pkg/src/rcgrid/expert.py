"""Scripted optimal experts and demonstration datasets.

The expert is a breadth-first shortest path that avoids distractor objects;
it replaces RL-trained experts while reproducing the training-set placement
regularities exactly. Datasets persist as JSON Lines: one meta record, then
one trajectory per line.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

from . import worldgrid as wg

SCHEMA_VERSION = 1


class UnsolvableLevel(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    level: wg.Level
    instruction: wg.Instruction
    actions: tuple
    success: bool

    def to_record(self):
        return {
            "level": self.level.to_record(),
            "instruction": self.instruction.text,
            "actions": list(self.actions),
            "success": self.success,
        }

    @staticmethod
    def from_record(rec):
        return Trajectory(
            level=wg.Level.from_record(rec["level"]),
            instruction=wg.Instruction.from_text(rec["instruction"]),
            actions=tuple(rec["actions"]),
            success=bool(rec["success"]),
        )


@dataclass
class DemoDataset:
    records: list
    meta: dict

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return (isinstance(other, DemoDataset) and self.meta == other.meta
                and self.records == other.records)


def solve(level):
    """BFS shortest action path to the goal, avoiding distractor cells.

    Ties between equal-length paths resolve by expanding neighbors in
    up < down < left < right order.
    """
    goal = level.goal_object().cell
    blocked = set(level.distractor_cells())
    start = level.agent_start
    parent = {start: None}
    q = deque([start])
    while q:
        cell = q.popleft()
        if cell == goal:
            actions = []
            while parent[cell] is not None:
                prev, action = parent[cell]
                actions.append(action)
                cell = prev
            return tuple(reversed(actions))
        r, c = cell
        for action in wg.ACTIONS:
            dr, dc = wg.ACTION_DELTAS[action]
            nxt = (r + dr, c + dc)
            if (0 <= nxt[0] < wg.GRID and 0 <= nxt[1] < wg.GRID
                    and not level.is_wall(nxt) and nxt not in parent
                    and nxt not in blocked):
                parent[nxt] = (cell, action)
                q.append(nxt)
    raise UnsolvableLevel(
        f"no path from {start} to {goal} in level seed {level.level_seed}")


def replay(trajectory):
    """Re-execute actions from the level spec; returns the EnvState sequence."""
    state = wg.reset(trajectory.level)
    states = [state]
    for action in trajectory.actions:
        state = wg.step(state, action)
        states.append(state)
    return states


def generate_demos(task_id, split, n, seed):
    """n expert trajectories on distinct level seeds derived from `seed`."""
    if n <= 0:
        raise ValueError("n must be positive")
    instruction = wg.instruction_for(task_id, split)
    records = []
    for i in range(n):
        level_seed = (int(seed) << 20) + i
        level = wg.make_level(task_id, split, level_seed)
        actions = solve(level)
        traj = Trajectory(level=level, instruction=instruction,
                          actions=actions, success=True)
        final = replay(traj)[-1]
        if not (final.done and final.succeeded):
            raise RuntimeError(
                f"replay mismatch on level seed {level_seed}: expert path did "
                "not reproduce a successful episode")
        records.append(traj)
    meta = {"task_id": task_id, "split": split, "seed": int(seed),
            "count": n, "schema_version": SCHEMA_VERSION}
    return DemoDataset(records=records, meta=meta)


def save(dataset, path):
    with open(path, "w") as f:
        f.write(json.dumps(dataset.meta, sort_keys=True) + "\n")
        for traj in dataset.records:
            f.write(json.dumps(traj.to_record(), sort_keys=True) + "\n")


def load(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file (line 1 missing meta)")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: malformed meta at line 1: {e}")
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DatasetFormatError(
            f"{path}: schema version {meta.get('schema_version')} != {SCHEMA_VERSION} at line 1")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            records.append(Trajectory.from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DatasetFormatError(f"{path}: malformed trajectory at line {lineno}: {e}")
    if len(records) != meta["count"]:
        raise DatasetFormatError(
            f"{path}: truncated file, meta count {meta['count']} != {len(records)} records")
    return DemoDataset(records=records, meta=meta)


def train_val_split(dataset, val_fraction=0.1):
    """Deterministic 90/10 split by record index."""
    n_val = max(1, int(len(dataset.records) * val_fraction)) if len(dataset.records) > 1 else 0
    n_train = len(dataset.records) - n_val
    return dataset.records[:n_train], dataset.records[n_train:]
