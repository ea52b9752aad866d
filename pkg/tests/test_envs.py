import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cldc.envs import (
    OMNI,
    ORIENTED,
    SUBSETS,
    ActionSpace,
    GridConfig,
    GridState,
    SequenceSpec,
    TaskSpec,
    VecEnv,
    build_sequence,
    consistent_actions,
    decode_observation,
    encode_observation,
    env_reset,
    env_step,
    normalize_return,
    reachable_cells,
)
from cldc.errors import ConfigError, IllegalActionError

E, S, W, N = 0, 1, 2, 3


def task(family="oriented", names=None, w=8, h=8, max_steps=None, goal_rule=None):
    cat = ORIENTED if family == "oriented" else OMNI
    names = names or cat.names
    return TaskSpec(GridConfig(w, h, max_steps, goal_rule), ActionSpace.from_names(cat, names))


def idx(name, cat=ORIENTED):
    return cat.index(name)


# -- reset ---------------------------------------------------------------------


def test_reset_is_deterministic():
    t = task("omni")
    assert env_reset(t, 42)[0] == env_reset(t, 42)[0]
    assert np.array_equal(env_reset(t, 42)[1], env_reset(t, 42)[1])


def test_oriented_corner_rule():
    s, _ = env_reset(task(names=SUBSETS["oriented"][3]), 5)
    assert (s.x, s.y, s.heading, s.goal, s.t) == (0, 0, E, (7, 7), 0)


@pytest.mark.parametrize("seed", range(30))
def test_omni_three_action_goal_in_start_column(seed):
    t = task("omni", SUBSETS["omni"][3])
    s, _ = env_reset(t, seed)
    assert s.goal[0] == s.x and s.goal != (s.x, s.y)


def test_reachable_cells_oracle():
    t = task("omni", ["stay", "right"], w=5, h=3)
    assert reachable_cells(t, (2, 1)) == {(2, 1), (3, 1), (4, 1)}


def test_no_reachable_goal_is_config_error():
    t = task("omni", ["stay", "right"], w=3, h=3)
    # starts in the last column for some seed: nothing reachable but the start
    errors = 0
    for seed in range(40):
        try:
            env_reset(t, seed)
        except ConfigError:
            errors += 1
    assert errors > 0


# -- step ----------------------------------------------------------------------


def test_forward_facing_east():
    t = task()
    s = GridState(1, 1, E, (7, 7))
    nxt, _, r, d = env_step(s, idx("forward"), t)
    assert (nxt.x, nxt.y, nxt.heading, r, d) == (2, 1, E, 0.0, False)


@pytest.mark.parametrize(
    "heading,name,expect",
    [
        (E, "move_left", (3, 2)),  # left of east is north (y up the screen)
        (E, "move_right", (3, 4)),
        (N, "forward", (3, 2)),
        (N, "move_left", (2, 3)),
        (S, "forward_left", (4, 4)),
        (W, "forward_right", (2, 2)),
        (E, "turn_left", (3, 3)),
    ],
)
def test_oriented_effect_table(heading, name, expect):
    s = GridState(3, 3, heading, (7, 7))
    nxt, _, _, _ = env_step(s, idx(name), task())
    assert (nxt.x, nxt.y) == expect


def test_turns_rotate_heading():
    t = task()
    s = GridState(3, 3, E, (7, 7))
    assert env_step(s, idx("turn_left"), t)[0].heading == N
    assert env_step(s, idx("turn_right"), t)[0].heading == S


def test_blocked_forward_is_noop():
    t = task()
    s = GridState(7, 0, E, (0, 7))
    nxt, _, r, d = env_step(s, idx("forward"), t)
    assert (nxt.x, nxt.y, nxt.heading) == (7, 0, E)
    assert nxt.t == 1 and r == 0.0 and not d


def test_reward_formula():
    t = task(max_steps=100)
    s = GridState(6, 7, E, (7, 7), t=9)
    nxt, _, r, d = env_step(s, idx("forward"), t)
    assert nxt.t == 10 and d
    assert r == pytest.approx(0.91, abs=1e-15)


def test_horizon_terminates():
    t = task(max_steps=3)
    s, _ = env_reset(t, 0)
    for k in range(3):
        s, _, r, d = env_step(s, idx("turn_left"), t)
    assert d and r == 0.0 and s.t == 3


def test_default_horizon():
    assert task(w=5, h=5).horizon == 100


def test_inactive_action_rejected():
    t = task(names=SUBSETS["oriented"][3])
    s, _ = env_reset(t, 0)
    with pytest.raises(IllegalActionError):
        env_step(s, idx("move_left"), t)


def test_step_after_done_rejected():
    t = task(max_steps=1)
    s, _ = env_reset(t, 0)
    s, *_ = env_step(s, 0, t)
    with pytest.raises(IllegalActionError):
        env_step(s, 0, t)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.integers(0, 8), min_size=1, max_size=60), st.sampled_from(["oriented", "omni"]))
def test_trajectories_deterministic_and_bounded(seed, actions, family):
    t = task(family, w=4, h=4, max_steps=40)
    n = len(t.catalog)

    def rollout():
        s, o = env_reset(t, seed)
        out, total = [o], 0.0
        for a in actions:
            if s.done:
                break
            s, o, r, d = env_step(s, a % n, t)
            assert 0 <= s.x < 4 and 0 <= s.y < 4 and s.t <= t.horizon
            out.append(o)
            total += r
        return out, total

    a, ra = rollout()
    b, rb = rollout()
    assert all(np.array_equal(x, y) for x, y in zip(a, b)) and ra == rb
    assert 0.0 <= ra <= 1.0


# -- cross-task consistency ----------------------------------------------------


def all_states(t):
    w, h = t.grid.width, t.grid.height
    headings = range(4) if t.family == "oriented" else [None]
    for x, y, hd, gx, gy in itertools.product(range(w), range(h), headings, range(w), range(h)):
        if (x, y) != (gx, gy):
            yield GridState(x, y, hd, (gx, gy), t=3)


@pytest.mark.parametrize("family", ["oriented", "omni"])
@pytest.mark.parametrize("situation", ["expansion", "contraction", "expansion_contraction", "contraction_expansion"])
def test_shared_actions_consistent_across_tasks(family, situation):
    seq = build_sequence(situation, family, GridConfig(4, 4))
    for ti, tj in itertools.combinations(seq.tasks, 2):
        shared = [a for a in ti.space.indices if a in tj.space]
        for s in all_states(ti):
            for a in shared:
                si, oi, ri, di = env_step(s, a, ti)
                sj, oj, rj, dj = env_step(s, a, tj)
                assert si == sj and ri == rj and di == dj and np.array_equal(oi, oj)


# -- sequences -----------------------------------------------------------------


def test_expansion_oriented_sets():
    seq = build_sequence("expansion", "oriented")
    sets = [set(t.space.names) for t in seq.tasks]
    assert sets[0] == {"turn_left", "turn_right", "forward"}
    assert sets[1] == sets[0] | {"move_left", "move_right"}
    assert sets[2] == sets[1] | {"forward_left", "forward_right"}
    for a, b in zip(seq.tasks[:-1], seq.tasks[1:]):
        assert a.space.issubset(b.space) and a.space != b.space


@pytest.mark.parametrize(
    "situation,family,sizes",
    [
        ("contraction", "omni", [9, 5, 3]),
        ("expansion", "omni", [3, 5, 9]),
        ("contraction", "oriented", [7, 5, 3]),
        ("expansion_contraction", "oriented", [3, 7, 5]),
        ("contraction_expansion", "oriented", [5, 3, 7]),
    ],
)
def test_sequence_sizes(situation, family, sizes):
    seq = build_sequence(situation, family, budgets=10)
    assert [t.space.size for t in seq.tasks] == sizes
    assert [t.index for t in seq.tasks] == [1, 2, 3]
    assert all(t.steps == 10 for t in seq.tasks)


def test_unknown_tags():
    with pytest.raises(ConfigError):
        build_sequence("zigzag", "oriented")
    with pytest.raises(ConfigError):
        build_sequence("expansion", "hex")


def test_custom_sequence():
    seq = build_sequence("custom", "oriented", custom=[["forward", "turn_left"], ["forward", "turn_right"]])
    assert [t.space.names for t in seq.tasks] == [["turn_left", "forward"], ["turn_right", "forward"]]
    with pytest.raises(ConfigError):
        build_sequence("custom", "oriented")


def test_sequence_invariants_enforced():
    t3 = task(names=SUBSETS["oriented"][3])
    t5 = task(names=SUBSETS["oriented"][5])
    with pytest.raises(ConfigError):
        SequenceSpec("expansion", (t5, t3))
    with pytest.raises(ConfigError):
        SequenceSpec("custom", (t3, t3))
    with pytest.raises(ConfigError):
        SequenceSpec("custom", (t3, task(names=SUBSETS["oriented"][5], w=5)))


def test_empty_action_space_rejected():
    with pytest.raises(ConfigError):
        ActionSpace.from_names(ORIENTED, [])


# -- observations --------------------------------------------------------------


def test_observation_one_hot_count():
    t = task(w=2, h=2)
    o = encode_observation(GridState(0, 0, N, (1, 1)), t)
    assert o.shape == (12,) and o.sum() == 3 and set(np.unique(o)) == {0.0, 1.0}


@pytest.mark.parametrize("family", ["oriented", "omni"])
def test_observation_injective_and_invertible(family):
    t = task(family, w=3, h=3)
    seen = {}
    for s in all_states(t):
        o = encode_observation(s, t)
        key = o.tobytes()
        assert key not in seen
        seen[key] = s
        back = decode_observation(o, t)
        assert (back.x, back.y, back.heading, back.goal) == (s.x, s.y, s.heading, s.goal)
        assert np.array_equal(o, encode_observation(s, t))


def test_consistent_actions_detects_ambiguity():
    t = task()
    s = GridState(7, 0, E, (0, 7))
    o = encode_observation(s, t)
    # forward and move_left both hit the wall at the top-right corner facing east
    amb = consistent_actions(o, o, t)
    assert set(amb) == {idx("forward"), idx("move_left"), idx("forward_left"), idx("forward_right")}


def test_normalize_return():
    t = task()
    assert normalize_return(0.0, t) == 0.0
    assert normalize_return(0.91, t) == 0.91
    wide = TaskSpec(GridConfig(), t.space, reward_range=(-1.0, 1.0))
    assert normalize_return(0.0, wide) == 0.5
    flat = TaskSpec(GridConfig(), t.space, reward_range=(1.0, 1.0))
    with pytest.raises(ConfigError):
        normalize_return(0.3, flat)


# -- vectorised env ------------------------------------------------------------


def test_vecenv_autoreset_and_slot_independence():
    t = task(w=3, h=3, max_steps=4)
    a = VecEnv(t, 3, seed=9)
    b = VecEnv(t, 1, seed=9)
    for _ in range(10):
        oa, ra, da = a.step([0, 1, 2])
        ob, rb, db = b.step([0])
        assert np.array_equal(oa[0], ob[0]) and ra[0] == rb[0] and da[0] == db[0]
    assert all(s.t < 4 for s in a.states)
