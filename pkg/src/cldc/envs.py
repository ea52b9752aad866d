"""Deterministic gridworlds whose tasks differ only in the available actions.

Two action families share one effect table each:

* ``oriented``: MiniGrid-style agent with a heading. Turns rotate the heading,
  the translation actions move relative to it.
* ``omni``: absolute moves in eight directions plus ``stay``.

Coordinates follow MiniGrid: x grows to the right, y grows downward, heading
0=E, 1=S, 2=W, 3=N. Moves that leave the grid are no-ops.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, IllegalActionError

HEADINGS = ((1, 0), (0, 1), (-1, 0), (0, -1))  # E, S, W, N


@dataclass(frozen=True)
class ActionCatalog:
    family: str
    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigError("action names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


ORIENTED = ActionCatalog(
    "oriented",
    ("turn_left", "turn_right", "forward", "move_left", "move_right", "forward_left", "forward_right"),
)
OMNI = ActionCatalog(
    "omni",
    ("stay", "up", "down", "left", "right", "up_left", "up_right", "down_left", "down_right"),
)
CATALOGS = {"oriented": ORIENTED, "omni": OMNI}

# oriented: (heading change, steps forward, steps to the left)
ORIENTED_EFFECTS = {
    "turn_left": (-1, 0, 0),
    "turn_right": (1, 0, 0),
    "forward": (0, 1, 0),
    "move_left": (0, 0, 1),
    "move_right": (0, 0, -1),
    "forward_left": (0, 1, 1),
    "forward_right": (0, 1, -1),
}
# omni: absolute (dx, dy)
OMNI_EFFECTS = {
    "stay": (0, 0),
    "up": (0, -1),
    "down": (0, 1),
    "left": (-1, 0),
    "right": (1, 0),
    "up_left": (-1, -1),
    "up_right": (1, -1),
    "down_left": (-1, 1),
    "down_right": (1, 1),
}

# nested subsets used by the built-in sequences, keyed by size
SUBSETS = {
    "oriented": {
        3: ("turn_left", "turn_right", "forward"),
        5: ("turn_left", "turn_right", "forward", "move_left", "move_right"),
        7: ORIENTED.names,
    },
    "omni": {
        3: ("stay", "up", "down"),
        5: ("stay", "up", "down", "left", "right"),
        9: OMNI.names,
    },
}
SITUATION_SIZES = {
    "oriented": {
        "expansion": (3, 5, 7),
        "contraction": (7, 5, 3),
        "expansion_contraction": (3, 7, 5),
        "contraction_expansion": (5, 3, 7),
    },
    "omni": {
        "expansion": (3, 5, 9),
        "contraction": (9, 5, 3),
        "expansion_contraction": (3, 9, 5),
        "contraction_expansion": (5, 3, 9),
    },
}
SITUATIONS = ("expansion", "contraction", "expansion_contraction", "contraction_expansion", "custom")


@dataclass(frozen=True)
class ActionSpace:
    catalog: ActionCatalog
    mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.mask) != len(self.catalog):
            raise ConfigError("mask length must equal catalog length")
        if not any(self.mask):
            raise ConfigError("an action space needs at least one action")

    @classmethod
    def from_names(cls, catalog: ActionCatalog, names: Sequence[str]) -> "ActionSpace":
        unknown = set(names) - set(catalog.names)
        if unknown:
            raise ConfigError(f"unknown actions for {catalog.family}: {sorted(unknown)}")
        return cls(catalog, tuple(n in names for n in catalog.names))

    @property
    def size(self) -> int:
        return sum(self.mask)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.mask, dtype=bool)

    @property
    def indices(self) -> list[int]:
        return [i for i, m in enumerate(self.mask) if m]

    @property
    def names(self) -> list[str]:
        return [self.catalog.names[i] for i in self.indices]

    def __contains__(self, action: int) -> bool:
        return 0 <= action < len(self.mask) and self.mask[action]

    def issubset(self, other: "ActionSpace") -> bool:
        return all(b or not a for a, b in zip(self.mask, other.mask))


@dataclass(frozen=True)
class GridConfig:
    width: int = 8
    height: int = 8
    max_steps: int | None = None  # None -> 4 * width * height
    goal_rule: str | None = None  # "corner" | "random"; None -> family default

    def horizon(self) -> int:
        return self.max_steps if self.max_steps is not None else 4 * self.width * self.height


@dataclass(frozen=True)
class TaskSpec:
    grid: GridConfig
    space: ActionSpace
    steps: int = 0
    index: int = 1
    reward_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.grid.horizon() < 1:
            raise ConfigError("episode horizon must be >= 1")
        if self.grid.width < 1 or self.grid.height < 1:
            raise ConfigError("grid must have at least one cell")

    @property
    def family(self) -> str:
        return self.space.catalog.family

    @property
    def catalog(self) -> ActionCatalog:
        return self.space.catalog

    @property
    def goal_rule(self) -> str:
        if self.grid.goal_rule is not None:
            return self.grid.goal_rule
        return "corner" if self.family == "oriented" else "random"

    @property
    def horizon(self) -> int:
        return self.grid.horizon()

    @property
    def obs_dim(self) -> int:
        cells = self.grid.width * self.grid.height
        return 2 * cells + (4 if self.family == "oriented" else 0)


@dataclass(frozen=True)
class SequenceSpec:
    situation: str
    tasks: tuple[TaskSpec, ...]
    seed: int = 0

    def __post_init__(self):
        for a, b in zip(self.tasks[:-1], self.tasks[1:]):
            if a.grid != b.grid or a.catalog != b.catalog:
                raise ConfigError("tasks in a sequence must share grid and catalog")
            if a.space == b.space:
                raise ConfigError("consecutive tasks must have different action spaces")
            if self.situation == "expansion" and not a.space.issubset(b.space):
                raise ConfigError("expansion requires nested growing action spaces")
            if self.situation == "contraction" and not b.space.issubset(a.space):
                raise ConfigError("contraction requires nested shrinking action spaces")

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def union(self) -> ActionSpace:
        mask = tuple(any(t.space.mask[i] for t in self.tasks) for i in range(len(self.tasks[0].catalog)))
        return ActionSpace(self.tasks[0].catalog, mask)


@dataclass(frozen=True)
class GridState:
    x: int
    y: int
    heading: int | None  # None for the omni family
    goal: tuple[int, int]
    t: int = 0
    done: bool = False


def _effect(state: GridState, name: str, family: str) -> tuple[int, int, int | None]:
    if family == "oriented":
        turn, fwd, left = ORIENTED_EFFECTS[name]
        dx, dy = HEADINGS[state.heading]
        # left of heading (dx, dy) is (dy, -dx) with y pointing down
        return (
            state.x + fwd * dx + left * dy,
            state.y + fwd * dy - left * dx,
            (state.heading + turn) % 4,
        )
    dx, dy = OMNI_EFFECTS[name]
    return state.x + dx, state.y + dy, None


def move(state: GridState, action: int, task: TaskSpec) -> tuple[int, int, int | None]:
    """Position and heading after ``action``, ignoring goal, time and legality."""
    x, y, heading = _effect(state, task.catalog.names[action], task.family)
    if not (0 <= x < task.grid.width and 0 <= y < task.grid.height):
        return state.x, state.y, state.heading
    return x, y, heading


def reachable_cells(task: TaskSpec, start: tuple[int, int], heading: int | None = None) -> set[tuple[int, int]]:
    """Cells reachable from ``start`` with the task's active actions (BFS)."""
    probe_goal = (-1, -1)
    first = GridState(start[0], start[1], heading, probe_goal)
    seen = {(first.x, first.y, first.heading)}
    queue = deque([first])
    while queue:
        s = queue.popleft()
        for a in task.space.indices:
            x, y, h = move(s, a, task)
            if (x, y, h) not in seen:
                seen.add((x, y, h))
                queue.append(GridState(x, y, h, probe_goal))
    return {(x, y) for x, y, _ in seen}


def env_reset(task: TaskSpec, episode_seed: int) -> tuple[GridState, np.ndarray]:
    rng = np.random.default_rng(episode_seed)
    w, h = task.grid.width, task.grid.height
    rule = task.goal_rule
    if task.family == "oriented":
        if rule == "corner":
            start, heading = (0, 0), 0
        else:
            start = (int(rng.integers(w)), int(rng.integers(h)))
            heading = int(rng.integers(4))
    else:
        start, heading = (int(rng.integers(w)), int(rng.integers(h))), None

    if rule == "corner":
        goal = (w - 1, h - 1)
        if goal == start or goal not in reachable_cells(task, start, heading):
            raise ConfigError("corner goal is not reachable from the start cell")
    elif rule == "random":
        cells = sorted(reachable_cells(task, start, heading) - {start})
        if not cells:
            raise ConfigError("no reachable goal cell under this action space")
        goal = cells[int(rng.integers(len(cells)))]
    else:
        raise ConfigError(f"unknown goal rule {rule!r}")
    state = GridState(start[0], start[1], heading, goal)
    return state, encode_observation(state, task)


def env_step(state: GridState, action: int, task: TaskSpec) -> tuple[GridState, np.ndarray, float, bool]:
    if state.done:
        raise IllegalActionError("episode already finished; reset first")
    if action not in task.space:
        raise IllegalActionError(
            f"action {action} is not active in task {task.index} ({task.space.names})"
        )
    x, y, heading = move(state, action, task)
    t = state.t + 1
    reached = (x, y) == state.goal
    reward = 1.0 - 0.9 * (t / task.horizon) if reached else 0.0
    done = reached or t >= task.horizon
    nxt = replace(state, x=x, y=y, heading=heading, t=t, done=done)
    return nxt, encode_observation(nxt, task), reward, done


def encode_observation(state: GridState, task: TaskSpec) -> np.ndarray:
    """One-hot agent cell, one-hot heading (oriented only), one-hot goal cell."""
    w, h = task.grid.width, task.grid.height
    cells = w * h
    obs = np.zeros(task.obs_dim)
    obs[state.y * w + state.x] = 1.0
    off = cells
    if task.family == "oriented":
        obs[off + state.heading] = 1.0
        off += 4
    obs[off + state.goal[1] * w + state.goal[0]] = 1.0
    return obs


def normalize_return(raw: float, task: TaskSpec) -> float:
    lo, hi = task.reward_range
    if hi == lo:
        raise ConfigError("reward range is degenerate")
    return (raw - lo) / (hi - lo)


def build_sequence(
    situation: str,
    family: str,
    grid: GridConfig | None = None,
    budgets: int | Sequence[int] = 0,
    seed: int = 0,
    custom: Sequence[Sequence[str]] | None = None,
) -> SequenceSpec:
    """Task sequence for one of the built-in situations (or ``custom`` action lists)."""
    if family not in CATALOGS:
        raise ConfigError(f"unknown action family {family!r}")
    if situation not in SITUATIONS:
        raise ConfigError(f"unknown situation {situation!r}")
    catalog = CATALOGS[family]
    grid = grid or GridConfig()
    if situation == "custom":
        if not custom:
            raise ConfigError("custom situation needs explicit action lists")
        spaces = [ActionSpace.from_names(catalog, names) for names in custom]
    else:
        if custom:
            raise ConfigError("explicit action lists are only allowed with situation 'custom'")
        spaces = [
            ActionSpace.from_names(catalog, SUBSETS[family][k])
            for k in SITUATION_SIZES[family][situation]
        ]
    if isinstance(budgets, int):
        budgets = [budgets] * len(spaces)
    if len(budgets) != len(spaces):
        raise ConfigError("need one step budget per task")
    if any(b < 0 for b in budgets):
        raise ConfigError("step budgets must be >= 0")
    tasks = tuple(
        TaskSpec(grid, space, int(b), i + 1) for i, (space, b) in enumerate(zip(spaces, budgets))
    )
    return SequenceSpec(situation, tasks, seed)


@dataclass
class VecEnv:
    """A batch of independent episodes of one task that auto-reset on termination.

    Each sub-environment draws its episode seeds from its own counter so the
    trajectory of one slot never depends on another.
    """

    task: TaskSpec
    n: int
    seed: int
    states: list[GridState] = field(init=False)
    obs: np.ndarray = field(init=False)
    _episodes: list[int] = field(init=False)

    def __post_init__(self):
        self._episodes = [0] * self.n
        self.states = []
        rows = []
        for k in range(self.n):
            s, o = env_reset(self.task, self._episode_seed(k))
            self.states.append(s)
            rows.append(o)
        self.obs = np.stack(rows)

    def _episode_seed(self, k: int) -> int:
        seq = np.random.SeedSequence([self.seed, k, self._episodes[k]])
        return int(seq.generate_state(1)[0])

    def step(self, actions: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (observations after auto-reset, rewards, done flags)."""
        rewards = np.zeros(self.n)
        dones = np.zeros(self.n, dtype=bool)
        for k, a in enumerate(actions):
            s, o, r, d = env_step(self.states[k], int(a), self.task)
            rewards[k], dones[k] = r, d
            if d:
                self._episodes[k] += 1
                s, o = env_reset(self.task, self._episode_seed(k))
            self.states[k] = s
            self.obs[k] = o
        return self.obs.copy(), rewards, dones


def decode_observation(obs: np.ndarray, task: TaskSpec) -> GridState:
    """Inverse of :func:`encode_observation` (time and done flag are not encoded)."""
    w = task.grid.width
    cells = w * task.grid.height
    pos = int(np.argmax(obs[:cells]))
    off = cells
    heading = None
    if task.family == "oriented":
        heading = int(np.argmax(obs[off : off + 4]))
        off += 4
    goal = int(np.argmax(obs[off : off + cells]))
    return GridState(pos % w, pos // w, heading, (goal % w, goal // w))


def consistent_actions(obs: np.ndarray, next_obs: np.ndarray, task: TaskSpec) -> list[int]:
    """Active actions whose effect maps ``obs`` to ``next_obs``."""
    s = decode_observation(obs, task)
    nxt = decode_observation(next_obs, task)
    target = (nxt.x, nxt.y, nxt.heading)
    return [a for a in task.space.indices if move(s, a, task) == target]
