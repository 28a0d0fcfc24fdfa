"""Level generation, dynamics, rendering, and language surfaces."""

import numpy as np
import pytest

from rcgrid import worldgrid as wg


def test_corridor_train_coin_far_right():
    for seed in range(5):
        level = wg.make_level("corridor", "train", seed)
        coin = level.goal_object()
        assert coin.cell[1] == 11
        assert coin.shape == "coin" and coin.color == "yellow"
        assert level.agent_start == (6, 1)


def test_corridor_test_coin_randomized():
    cells = {wg.make_level("corridor", "test", s).goal_object().cell
             for s in range(30)}
    assert len(cells) > 10


def test_maze_ii_test_object_set():
    level = wg.make_level("maze_ii", "test", 3)
    kinds = {(o.shape, o.color) for o in level.objects}
    assert kinds == {("gem", "yellow"), ("diagonal_line", "red")}
    assert level.goal_object().shape == "diagonal_line"


def test_maze_iii_test_object_set():
    level = wg.make_level("maze_iii", "test", 5)
    kinds = {(o.shape, o.color) for o in level.objects}
    assert kinds == {("gem", "yellow"), ("diagonal_line", "red"),
                     ("straight_line", "red")}
    assert level.goal_object() == wg.WorldObject(level.goal_object().cell,
                                                 "diagonal_line", "red")


def test_corridor_bluegem_test():
    level = wg.make_level("corridor_bluegem", "test", 9)
    assert [(o.shape, o.color) for o in level.objects] == [("gem", "blue")]


def test_make_level_deterministic():
    a = wg.make_level("maze_i", "test", 17)
    b = wg.make_level("maze_i", "test", 17)
    assert a == b


def test_exactly_one_goal_and_reachable():
    for task in wg.TASKS:
        for split in ("train", "test"):
            level = wg.make_level(task, split, 4)
            goal = level.goal_object()  # asserts uniqueness
            assert not level.is_wall(goal.cell)
            assert not level.is_wall(level.agent_start)
            assert wg.reachable(level.walls, level.agent_start, goal.cell,
                                blocked=level.distractor_cells())


def test_theme_hues_disjoint():
    train = [wg.make_level("corridor", "train", s).theme_hue for s in range(20)]
    test = [wg.make_level("corridor", "test", s).theme_hue for s in range(20)]
    assert max(train) < min(test)


def test_level_json_round_trip():
    level = wg.make_level("maze_ii", "test", 12)
    assert wg.Level.from_record(level.to_record()) == level


def test_step_reach_goal():
    level = wg.make_level("corridor", "train", 0)
    state = wg.EnvState(level=level, agent=(6, 10))
    state = wg.step(state, "right")
    assert state.done and state.succeeded


def test_step_into_wall_stays():
    level = wg.make_level("corridor", "train", 0)
    state = wg.reset(level)
    nxt = wg.step(state, "left")
    assert nxt.agent == state.agent and nxt.t == 1


def test_step_onto_distractor_fails():
    level = wg.make_level("maze_ii", "test", 2)
    gem = [o for o in level.objects if o.shape == "gem"][0]
    r, c = gem.cell
    # stand next to the gem on a free side and step onto it
    for action, (dr, dc) in wg.ACTION_DELTAS.items():
        adj = (r - dr, c - dc)
        if 0 <= adj[0] < wg.GRID and 0 <= adj[1] < wg.GRID and not level.is_wall(adj):
            state = wg.EnvState(level=level, agent=adj)
            out = wg.step(state, action)
            assert out.done and not out.succeeded
            return
    pytest.fail("gem has no free adjacent cell")


def test_step_finished_episode_rejected():
    level = wg.make_level("corridor", "train", 0)
    state = wg.EnvState(level=level, agent=(6, 10))
    state = wg.step(state, "right")
    with pytest.raises(wg.EpisodeFinished):
        wg.step(state, "up")


def test_timeout_forces_done():
    level = wg.make_level("corridor", "train", 0)
    state = wg.reset(level)
    for _ in range(wg.MAX_EPISODE_LEN):
        state = wg.step(state, "left")  # bump the wall forever
    assert state.done and not state.succeeded and state.t == wg.MAX_EPISODE_LEN


def test_render_deterministic_and_in_range():
    level = wg.make_level("maze_i", "test", 3)
    a = wg.render(level, level.agent_start)
    b = wg.render(level, level.agent_start)
    assert np.array_equal(a, b)
    assert a.shape == (78, 78, 3)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_glyphs_differ():
    level = wg.make_level("corridor", "train", 0)
    base = level.objects[0]
    diffs = {}
    for shape in wg.SHAPES:
        mod = wg.Level(level.task_id, level.level_seed, level.split, level.walls,
                       (wg.WorldObject(base.cell, shape, "yellow"),),
                       level.agent_start, level.theme_hue, (shape, None))
        diffs[shape] = wg.render(mod, level.agent_start)
    d = np.abs(diffs["diagonal_line"] - diffs["straight_line"])
    assert (d.sum(axis=-1) > 0).sum() >= 4
    # glyph separability across all shape pairs
    shapes = list(diffs)
    for i in range(len(shapes)):
        for j in range(i + 1, len(shapes)):
            assert np.abs(diffs[shapes[i]] - diffs[shapes[j]]).mean() > 0.0


def test_instruction_strings_exact():
    assert wg.instruction_for("corridor").text == "The goal is to collect the coin."
    assert wg.instruction_for("maze_i").text == "Navigate a maze to collect the yellow cheese."
    assert wg.instruction_for("maze_ii").text == "Navigate a maze to collect the line."
    assert wg.instruction_for("maze_iii").text == "Navigate a maze to collect the red diagonal line."
    assert wg.instruction_for("corridor_bluegem").text == "The goal is to collect the blue gem."


def test_tokenize_normalization():
    a = wg.tokenize("The goal is to collect the coin.")
    b = wg.tokenize("the goal is to collect the coin")
    assert a == b
    assert len(a) == 16


def test_tokenize_empty_and_unknown():
    assert wg.tokenize("") == [wg.PAD_ID] * 16
    assert wg.tokenize("zzz-unknown word")[0] == 0


def test_caption_contains_object():
    level = wg.make_level("corridor", "train", 1)
    cap = wg.caption_for(level, level.agent_start)
    assert "yellow coin" in cap
    assert "right" in cap


def test_caption_at_agent():
    level = wg.make_level("corridor", "train", 1)
    cap = wg.caption_for(level, (6, 11))
    assert "at the agent" in cap


def test_caption_two_objects_nearest_first():
    level = wg.make_level("maze_ii", "test", 7)
    cap = wg.caption_for(level, level.agent_start)
    a_r, a_c = level.agent_start
    by_dist = sorted(level.objects,
                     key=lambda o: (abs(o.cell[0] - a_r) + abs(o.cell[1] - a_c),
                                    o.cell[0], o.cell[1]))
    first = wg.SHAPE_WORDS[by_dist[0].shape]
    second = wg.SHAPE_WORDS[by_dist[1].shape]
    assert cap.index(first) < cap.index(second)
    assert " and " in cap


def test_caption_tokens_known():
    for task in wg.TASKS:
        for split in ("train", "test"):
            level = wg.make_level(task, split, 2)
            ids = wg.tokenize(wg.caption_for(level, level.agent_start))
            assert 0 not in ids  # every caption word is in the vocabulary
