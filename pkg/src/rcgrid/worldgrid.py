"""Procedural 13x13 gridworld tasks with deterministic tile rendering.

Each task family places its goal object so that the training split carries a
spurious positional regularity (e.g. the coin always sits on the far right)
while the test split breaks it. Levels are pure functions of
(task_id, split, level_seed) and serialize to JSON records, so datasets store
specs rather than pixels.
"""

from __future__ import annotations

import colorsys
import hashlib
from collections import deque
from dataclasses import dataclass

import numpy as np

from .rng import Rng

GRID = 13
TILE = 6
OBS_SIZE = GRID * TILE  # 78
MAX_EPISODE_LEN = 120

ACTIONS = ("up", "down", "left", "right")
ACTION_DELTAS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}

TASKS = ("corridor", "maze_i", "maze_ii", "maze_iii", "corridor_bluegem")
SHAPES = ("coin", "gem", "diagonal_line", "straight_line", "cheese")
COLORS = {"yellow": (1.0, 1.0, 0.0), "red": (1.0, 0.0, 0.0), "blue": (0.0, 0.0, 1.0)}

WALL_GRAY = 0.5
AGENT_COLOR = (1.0, 1.0, 1.0)

INSTRUCTIONS = {
    "corridor": "The goal is to collect the coin.",
    "maze_i": "Navigate a maze to collect the yellow cheese.",
    "maze_ii": "Navigate a maze to collect the line.",
    "maze_iii": "Navigate a maze to collect the red diagonal line.",
    "corridor_bluegem": "The goal is to collect the blue gem.",
}

SHAPE_WORDS = {
    "coin": "coin",
    "gem": "gem",
    "diagonal_line": "diagonal line",
    "straight_line": "straight line",
    "cheese": "cheese",
}


class EpisodeFinished(RuntimeError):
    """step() called on a finished episode."""


@dataclass(frozen=True)
class WorldObject:
    cell: tuple  # (row, col)
    shape: str
    color: str


@dataclass(frozen=True)
class Level:
    task_id: str
    level_seed: int
    split: str
    walls: tuple  # tuple of row strings, '#' wall / '.' free
    objects: tuple  # tuple of WorldObject
    agent_start: tuple
    theme_hue: float
    goal_predicate: tuple  # (shape or None, color or None); None matches anything

    @property
    def width(self):
        return GRID

    @property
    def height(self):
        return GRID

    def is_wall(self, cell):
        r, c = cell
        return self.walls[r][c] == "#"

    def goal_object(self):
        matches = [o for o in self.objects if matches_predicate(o, self.goal_predicate)]
        assert len(matches) == 1, f"level must have exactly one goal object, got {len(matches)}"
        return matches[0]

    def distractor_cells(self):
        return [o.cell for o in self.objects
                if not matches_predicate(o, self.goal_predicate)]

    def to_record(self):
        return {
            "task_id": self.task_id,
            "level_seed": self.level_seed,
            "split": self.split,
            "walls": list(self.walls),
            "objects": [{"cell": list(o.cell), "shape": o.shape, "color": o.color}
                        for o in self.objects],
            "agent_start": list(self.agent_start),
            "theme_hue": self.theme_hue,
            "goal_predicate": list(self.goal_predicate),
        }

    @staticmethod
    def from_record(rec):
        return Level(
            task_id=rec["task_id"],
            level_seed=int(rec["level_seed"]),
            split=rec["split"],
            walls=tuple(rec["walls"]),
            objects=tuple(WorldObject(tuple(o["cell"]), o["shape"], o["color"])
                          for o in rec["objects"]),
            agent_start=tuple(rec["agent_start"]),
            theme_hue=float(rec["theme_hue"]),
            goal_predicate=tuple(rec["goal_predicate"]),
        )


def matches_predicate(obj, predicate):
    shape, color = predicate
    return (shape is None or obj.shape == shape) and (color is None or obj.color == color)


@dataclass
class EnvState:
    level: Level
    agent: tuple
    t: int = 0
    done: bool = False
    succeeded: bool = False


# -- level generation ---------------------------------------------------


def _task_stream(task_id, split, level_seed):
    # disjoint internal seed spaces for train/test; stream keyed by task
    key = int.from_bytes(hashlib.blake2s(f"{task_id}/{split}".encode(),
                                         digest_size=8).digest(), "little")
    internal = 2 * int(level_seed) + (1 if split == "test" else 0)
    return Rng(internal, stream_id=key)


def _open_room():
    rows = []
    for r in range(GRID):
        if r in (0, GRID - 1):
            rows.append("#" * GRID)
        else:
            rows.append("#" + "." * (GRID - 2) + "#")
    return tuple(rows)


def _carve_maze(rng):
    """Recursive backtracker over cells at odd coordinates; border is wall."""
    walls = np.ones((GRID, GRID), dtype=bool)
    cells = [(r, c) for r in range(1, GRID, 2) for c in range(1, GRID, 2)]
    start = cells[int(rng.integers(len(cells)))]
    walls[start] = False
    stack = [start]
    visited = {start}
    while stack:
        r, c = stack[-1]
        nbrs = []
        for dr, dc in ((-2, 0), (2, 0), (0, -2), (0, 2)):
            nr, nc = r + dr, c + dc
            if 1 <= nr < GRID - 1 and 1 <= nc < GRID - 1 and (nr, nc) not in visited:
                nbrs.append((nr, nc))
        if not nbrs:
            stack.pop()
            continue
        nr, nc = nbrs[int(rng.integers(len(nbrs)))]
        walls[(r + nr) // 2, (c + nc) // 2] = False
        walls[nr, nc] = False
        visited.add((nr, nc))
        stack.append((nr, nc))
    return tuple("".join("#" if walls[r, c] else "." for c in range(GRID))
                 for r in range(GRID))


def free_cells(walls):
    return [(r, c) for r in range(GRID) for c in range(GRID) if walls[r][c] == "."]


def reachable(walls, start, goal, blocked=()):
    """BFS reachability avoiding `blocked` cells."""
    blocked = set(blocked)
    if start in blocked or goal in blocked:
        return False
    seen = {start}
    q = deque([start])
    while q:
        cell = q.popleft()
        if cell == goal:
            return True
        r, c = cell
        for a in ACTIONS:
            dr, dc = ACTION_DELTAS[a]
            nxt = (r + dr, c + dc)
            if (0 <= nxt[0] < GRID and 0 <= nxt[1] < GRID
                    and walls[nxt[0]][nxt[1]] == "." and nxt not in seen
                    and nxt not in blocked):
                seen.add(nxt)
                q.append(nxt)
    return False


def _draw_hue(rng, split):
    # disjoint train/test theme ranges
    if split == "train":
        return float(rng.uniform(0.05, 0.45))
    return float(rng.uniform(0.55, 0.95))


def _pick_cell(rng, cells, exclude):
    cells = [c for c in cells if c not in exclude]
    return cells[int(rng.integers(len(cells)))]


def make_level(task_id, split, level_seed):
    if task_id not in TASKS:
        raise ValueError(f"unknown task_id {task_id!r}")
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    rng = _task_stream(task_id, split, level_seed)
    hue = _draw_hue(rng, split)

    if task_id in ("corridor", "corridor_bluegem"):
        walls = _open_room()
        agent = (6, 1)
        if task_id == "corridor_bluegem" and split == "test":
            cell = _pick_cell(rng, free_cells(walls), {agent})
            objects = (WorldObject(cell, "gem", "blue"),)
            predicate = ("gem", "blue")
        elif split == "train":
            objects = (WorldObject((6, 11), "coin", "yellow"),)
            predicate = ("coin", None)
        else:
            cell = _pick_cell(rng, free_cells(walls), {agent})
            objects = (WorldObject(cell, "coin", "yellow"),)
            predicate = ("coin", None)
        return Level(task_id, int(level_seed), split, walls, objects, agent,
                     hue, predicate)

    # maze family
    while True:
        walls = _carve_maze(rng)
        cells = free_cells(walls)
        agent = (11, 1)  # bottom-left maze cell, always carved
        if walls[agent[0]][agent[1]] != ".":
            continue
        if task_id == "maze_i":
            goal_cell = (1, 11) if split == "train" else _pick_cell(rng, cells, {agent})
            objects = (WorldObject(goal_cell, "cheese", "yellow"),)
            predicate = ("cheese", None)
        elif task_id == "maze_ii" and split == "train":
            cell = _pick_cell(rng, cells, {agent})
            objects = (WorldObject(cell, "diagonal_line", "yellow"),)
            predicate = ("diagonal_line", None)
        elif task_id == "maze_ii":
            goal = _pick_cell(rng, cells, {agent})
            gem = _pick_cell(rng, cells, {agent, goal})
            objects = (WorldObject(gem, "gem", "yellow"),
                       WorldObject(goal, "diagonal_line", "red"))
            predicate = ("diagonal_line", None)
        elif task_id == "maze_iii" and split == "train":
            # training alias of maze_ii: same demonstrations feed maze_iii tests
            cell = _pick_cell(rng, cells, {agent})
            objects = (WorldObject(cell, "diagonal_line", "yellow"),)
            predicate = ("diagonal_line", None)
        else:
            goal = _pick_cell(rng, cells, {agent})
            gem = _pick_cell(rng, cells, {agent, goal})
            straight = _pick_cell(rng, cells, {agent, goal, gem})
            objects = (WorldObject(gem, "gem", "yellow"),
                       WorldObject(goal, "diagonal_line", "red"),
                       WorldObject(straight, "straight_line", "red"))
            predicate = ("diagonal_line", "red")
        level = Level(task_id, int(level_seed), split, walls, objects, agent,
                      hue, predicate)
        goal_cell = level.goal_object().cell
        if reachable(walls, agent, goal_cell, blocked=level.distractor_cells()):
            return level
        # unreachable placement: resample everything from the ongoing stream


# -- environment dynamics -----------------------------------------------


def reset(level):
    return EnvState(level=level, agent=level.agent_start)


def step(state, action):
    if state.done:
        raise EpisodeFinished("cannot step a finished episode")
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    dr, dc = ACTION_DELTAS[action]
    r, c = state.agent
    nxt = (r + dr, c + dc)
    if not (0 <= nxt[0] < GRID and 0 <= nxt[1] < GRID) or state.level.is_wall(nxt):
        nxt = (r, c)
    t = state.t + 1
    done, succeeded = False, False
    goal_cell = state.level.goal_object().cell
    if nxt == goal_cell:
        done, succeeded = True, True
    elif nxt in state.level.distractor_cells():
        done, succeeded = True, False
    elif t >= MAX_EPISODE_LEN:
        done = True
    return EnvState(level=state.level, agent=nxt, t=t, done=done, succeeded=succeeded)


# -- rendering ----------------------------------------------------------


def _glyph_mask(shape):
    ys, xs = np.mgrid[0:TILE, 0:TILE]
    if shape == "coin":
        return (xs - 2.5) ** 2 + (ys - 2.5) ** 2 <= 2.5 ** 2
    if shape == "gem":
        return np.abs(xs - 2.5) + np.abs(ys - 2.5) <= 2.0
    if shape == "diagonal_line":
        return np.abs(xs - ys) <= 1
    if shape == "straight_line":
        return (ys == 2) | (ys == 3)
    if shape == "cheese":
        return xs <= ys
    raise ValueError(f"unknown shape {shape!r}")


_GLYPHS = {s: _glyph_mask(s) for s in SHAPES}


def render(level, agent_cell):
    """78x78x3 float64 frame in [0, 1]; pure function of (level, agent_cell)."""
    r, c = agent_cell
    if not (0 <= r < GRID and 0 <= c < GRID):
        raise ValueError(f"agent cell {agent_cell} off grid")
    bg = colorsys.hsv_to_rgb(level.theme_hue, 0.25, 0.6)
    img = np.empty((OBS_SIZE, OBS_SIZE, 3), dtype=np.float64)
    img[:, :] = bg
    for row in range(GRID):
        for col in range(GRID):
            if level.walls[row][col] == "#":
                img[row * TILE:(row + 1) * TILE, col * TILE:(col + 1) * TILE] = WALL_GRAY
    for obj in level.objects:
        orow, ocol = obj.cell
        block = img[orow * TILE:(orow + 1) * TILE, ocol * TILE:(ocol + 1) * TILE]
        block[_GLYPHS[obj.shape]] = COLORS[obj.color]
    img[r * TILE:(r + 1) * TILE, c * TILE:(c + 1) * TILE] = AGENT_COLOR
    return img


# -- language -----------------------------------------------------------


def _build_vocab():
    words = set()
    for text in INSTRUCTIONS.values():
        words.update(_normalize(text))
    for color in COLORS:
        words.add(color)
    for shape in SHAPES:
        words.update(SHAPE_WORDS[shape].split())
    words.update(["a", "and", "above", "below", "left", "right", "far",
                  "at", "agent", "near"])
    return ["<unk>", "<pad>"] + sorted(words)


def _normalize(text):
    cleaned = "".join(ch if ch.isalnum() or ch.isspace() else " "
                      for ch in text.lower())
    return cleaned.split()


VOCAB = _build_vocab()
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = 1
TOKEN_LEN = 16


def tokenize(text):
    """Fixed-vocabulary bag tokenizer; unknown -> 0, padded/truncated to 16."""
    ids = [WORD_TO_ID.get(w, 0) for w in _normalize(text)]
    ids = ids[:TOKEN_LEN]
    ids += [PAD_ID] * (TOKEN_LEN - len(ids))
    return ids


@dataclass(frozen=True)
class Instruction:
    text: str
    token_ids: tuple

    @staticmethod
    def from_text(text):
        return Instruction(text=text, token_ids=tuple(tokenize(text)))


def instruction_for(task_id, split="test"):
    if task_id not in INSTRUCTIONS:
        raise ValueError(f"unknown task_id {task_id!r}")
    # maze_iii / corridor_bluegem train on the base task's instruction
    if split == "train":
        if task_id == "maze_iii":
            return Instruction.from_text(INSTRUCTIONS["maze_ii"])
        if task_id == "corridor_bluegem":
            return Instruction.from_text(INSTRUCTIONS["corridor"])
    return Instruction.from_text(INSTRUCTIONS[task_id])


def caption_for(level, agent_cell):
    """Templated scene description: nearest objects first, coarse positions."""
    ar, ac = agent_cell
    keyed = sorted(level.objects,
                   key=lambda o: (abs(o.cell[0] - ar) + abs(o.cell[1] - ac),
                                  o.cell[0], o.cell[1]))
    phrases = []
    for obj in keyed:
        orow, ocol = obj.cell
        dr, dc = orow - ar, ocol - ac
        dist = abs(dr) + abs(dc)
        if dist == 0:
            where = "at the agent"
        else:
            if abs(dc) >= abs(dr):
                side = "to the right" if dc > 0 else "to the left"
            else:
                side = "below" if dr > 0 else "above"
            where = side if dist <= 3 else f"far {side}"
        phrases.append(f"a {obj.color} {SHAPE_WORDS[obj.shape]} {where}")
    return " and ".join(phrases)
