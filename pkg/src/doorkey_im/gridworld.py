"""DoorKey gridworld with egocentric partial observation.

A deterministic re-implementation of the MiniGrid DoorKey task: the agent
must pick up a key, unlock a door in a splitting wall, and walk onto the goal
square. The only environment reward is paid on reaching the goal.

Coordinates are ``(x, y)`` = (column, row), with ``y`` growing downwards.
Headings follow MiniGrid: 0=east, 1=south, 2=west, 3=north.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

VIEW_SIZE = 7
# object/color/state ids follow the MiniGrid tensor encoding
OBJECT_IDS = {"unseen": 0, "empty": 1, "wall": 2, "door": 4, "key": 5, "goal": 8}
COLOR_IDS = {"red": 0, "green": 1, "yellow": 4, "grey": 5}
DOOR_STATE_IDS = {"open": 0, "closed": 1, "locked": 2}
ENCODING_MAX = np.array([10.0, 5.0, 2.0])
OBS_DIM = VIEW_SIZE * VIEW_SIZE * 3 + 1

DIR_VEC = ((1, 0), (0, 1), (-1, 0), (0, -1))


class ConfigurationError(ValueError):
    """Raised when a layout cannot be generated for the requested size."""


class EpisodeOverError(RuntimeError):
    """Raised when ``step`` is called after termination or truncation."""


class Kind(enum.IntEnum):
    EMPTY = 0
    WALL = 1
    KEY = 2
    DOOR = 3
    GOAL = 4


class DoorState(enum.IntEnum):
    OPEN = 0
    CLOSED = 1
    LOCKED = 2


class Action(enum.IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    FORWARD = 2
    PICKUP = 3
    DROP = 4
    TOGGLE = 5
    DONE = 6


N_ACTIONS = len(Action)

# plain-int aliases for hot paths (enum attribute lookup is slow)
_EMPTY, _WALL, _KEY, _DOOR, _GOAL = (int(k) for k in Kind)
_OPEN, _CLOSED, _LOCKED = (int(s) for s in DoorState)
_LEFT, _RIGHT, _FORWARD, _PICKUP, _DROP, _TOGGLE, _DONE = (int(a) for a in Action)


@dataclass(frozen=True)
class Cell:
    kind: Kind
    door_state: DoorState | None = None

    def __post_init__(self):
        if (self.kind == Kind.DOOR) != (self.door_state is not None):
            raise ValueError("door_state must be set exactly for door cells")


@dataclass
class AgentPose:
    x: int
    y: int
    dir: int


@dataclass(frozen=True)
class Observation:
    """Egocentric view, ``view[row, col]`` with the agent at ``[6, 3]`` facing row 0."""

    view: np.ndarray
    carrying_key: bool

    @cached_property
    def vector(self) -> np.ndarray:
        """Flattened view normalized to [0, 1], followed by the carry flag (read-only)."""
        out = np.empty(OBS_DIM)
        out[:-1] = (self.view / ENCODING_MAX).ravel()
        out[-1] = 1.0 if self.carrying_key else 0.0
        out.setflags(write=False)
        return out

    @cached_property
    def object_names(self) -> tuple[str, ...]:
        return _object_names(self.view)

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return self.carrying_key == other.carrying_key and np.array_equal(self.view, other.view)

    __hash__ = None


@dataclass(frozen=True)
class StepOutcome:
    observation: Observation
    extrinsic_reward: float
    terminated: bool
    truncated: bool


@dataclass
class GridWorld:
    width: int
    height: int
    kinds: np.ndarray  # (height, width) of Kind values
    door_pos: tuple[int, int]
    door_state: DoorState
    pose: AgentPose
    max_steps: int
    layout_seed: int
    carrying_key: bool = False
    step_count: int = 0
    done: bool = False
    _version: int = 0
    _obs_cache: dict = field(default_factory=dict, repr=False)

    def cell(self, x: int, y: int) -> Cell:
        kind = Kind(int(self.kinds[y, x]))
        return Cell(kind, self.door_state if kind == Kind.DOOR else None)

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def front(self) -> tuple[int, int]:
        dx, dy = DIR_VEC[self.pose.dir]
        return self.pose.x + dx, self.pose.y + dy

    def walkable(self, x: int, y: int) -> bool:
        kind = self.kinds[y, x]
        if kind == _DOOR:
            return self.door_state == _OPEN
        return kind == _EMPTY or kind == _GOAL

    def count_keys(self) -> int:
        return int(np.count_nonzero(self.kinds == Kind.KEY))


def max_steps_for(size: int) -> int:
    """Step budget: MiniGrid's ``10 * size**2`` raised by 40%.

    Integer form of ``ceil(1.4 * 10 * size**2)``; 896 for the 8x8 grid.
    """
    return 14 * size * size


def new_doorkey(size: int, layout_seed: int) -> GridWorld:
    """Generate a seeded ``size`` x ``size`` DoorKey layout."""
    if size < 5:
        raise ConfigurationError(f"DoorKey needs size >= 5, got {size}")
    rng = np.random.default_rng(layout_seed)
    kinds = np.full((size, size), Kind.EMPTY, dtype=np.int8)
    kinds[0, :] = kinds[-1, :] = Kind.WALL
    kinds[:, 0] = kinds[:, -1] = Kind.WALL

    split_x = int(rng.integers(2, size - 2))
    kinds[:, split_x] = Kind.WALL
    door_y = int(rng.integers(1, size - 1))
    kinds[door_y, split_x] = Kind.DOOR
    kinds[size - 2, size - 2] = Kind.GOAL

    left = [(x, y) for y in range(1, size - 1) for x in range(1, split_x)]
    agent_idx, key_idx = rng.choice(len(left), size=2, replace=False)
    kx, ky = left[key_idx]
    kinds[ky, kx] = Kind.KEY
    ax, ay = left[agent_idx]
    heading = int(rng.integers(0, 4))

    return GridWorld(
        width=size,
        height=size,
        kinds=kinds,
        door_pos=(split_x, door_y),
        door_state=DoorState.LOCKED,
        pose=AgentPose(ax, ay, heading),
        max_steps=max_steps_for(size),
        layout_seed=int(layout_seed),
    )


def step(world: GridWorld, action: int) -> StepOutcome:
    """Apply one action in place and return the outcome."""
    if world.done:
        raise EpisodeOverError("episode already ended; generate a new world")
    action = int(action)
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"invalid action {action}")
    world.step_count += 1
    pose = world.pose
    reward = 0.0
    terminated = False

    if action == _LEFT:
        pose.dir = (pose.dir - 1) % 4
    elif action == _RIGHT:
        pose.dir = (pose.dir + 1) % 4
    elif action == _FORWARD:
        fx, fy = world.front()
        if world.in_bounds(fx, fy) and world.walkable(fx, fy):
            pose.x, pose.y = fx, fy
            if world.kinds[fy, fx] == _GOAL:
                terminated = True
                reward = 1.0 - 0.9 * (world.step_count / world.max_steps)
    elif action == _PICKUP:
        fx, fy = world.front()
        if not world.carrying_key and world.in_bounds(fx, fy) and world.kinds[fy, fx] == _KEY:
            world.kinds[fy, fx] = _EMPTY
            world.carrying_key = True
            world._version += 1
    elif action == _DROP:
        fx, fy = world.front()
        if world.carrying_key and world.in_bounds(fx, fy) and world.kinds[fy, fx] == _EMPTY:
            world.kinds[fy, fx] = _KEY
            world.carrying_key = False
            world._version += 1
    elif action == _TOGGLE:
        if world.front() == world.door_pos:
            if world.door_state == DoorState.LOCKED:
                if world.carrying_key:
                    world.door_state = DoorState.OPEN
                    world._version += 1
            elif world.door_state == DoorState.CLOSED:
                world.door_state = DoorState.OPEN
                world._version += 1
            else:
                world.door_state = DoorState.CLOSED
                world._version += 1
    # Action.DONE is a no-op

    truncated = not terminated and world.step_count >= world.max_steps
    world.done = terminated or truncated
    return StepOutcome(observe(world), reward, terminated, truncated)


def _encode_cell(world: GridWorld, x: int, y: int) -> tuple[int, int, int]:
    kind = world.kinds[y, x]
    if kind == _EMPTY:
        return (OBJECT_IDS["empty"], 0, 0)
    if kind == _WALL:
        return (OBJECT_IDS["wall"], COLOR_IDS["grey"], 0)
    if kind == _KEY:
        return (OBJECT_IDS["key"], COLOR_IDS["yellow"], 0)
    if kind == _DOOR:
        return (OBJECT_IDS["door"], COLOR_IDS["yellow"], int(world.door_state))
    return (OBJECT_IDS["goal"], COLOR_IDS["green"], 0)


def _transparent(world: GridWorld, x: int, y: int) -> bool:
    kind = world.kinds[y, x]
    if kind == _WALL:
        return False
    if kind == _DOOR:
        return world.door_state == _OPEN
    return True


def observe(world: GridWorld) -> Observation:
    """Egocentric 7x7 view with wall/door occlusion.

    Visibility spreads outward from the agent's cell: a cell is visible if
    one of its orthogonal neighbours toward the agent (one row closer, or one
    column closer to the centre line) is visible and transparent.
    """
    pose = world.pose
    key = (pose.x, pose.y, pose.dir, world.carrying_key, world._version)
    cached = world._obs_cache.get(key)
    if cached is not None:
        return cached

    fdx, fdy = DIR_VEC[pose.dir]
    rdx, rdy = DIR_VEC[(pose.dir + 1) % 4]
    centre = VIEW_SIZE // 2
    last = VIEW_SIZE - 1

    view = np.zeros((VIEW_SIZE, VIEW_SIZE, 3), dtype=np.uint8)
    visible = [[False] * VIEW_SIZE for _ in range(VIEW_SIZE)]
    clear = [[False] * VIEW_SIZE for _ in range(VIEW_SIZE)]

    for row in range(last, -1, -1):
        ahead = last - row
        # centre column first, then outward on both sides
        for col in (centre, *range(centre - 1, -1, -1), *range(centre + 1, VIEW_SIZE)):
            lateral = col - centre
            wx = pose.x + ahead * fdx + lateral * rdx
            wy = pose.y + ahead * fdy + lateral * rdy
            if row == last and col == centre:
                seen = True
            else:
                seen = row < last and visible[row + 1][col] and clear[row + 1][col]
                if not seen and col != centre:
                    inner = col - 1 if col > centre else col + 1
                    seen = visible[row][inner] and clear[row][inner]
            if not seen or not world.in_bounds(wx, wy):
                continue
            visible[row][col] = True
            clear[row][col] = _transparent(world, wx, wy)
            view[row, col] = _encode_cell(world, wx, wy)

    view.setflags(write=False)
    obs = Observation(view, world.carrying_key)
    world._obs_cache[key] = obs
    return obs


_OBJECT_PRIORITY = ("key", "door(open)", "door(closed)", "door(locked)", "goal", "wall")
_STATE_NAMES = {v: k for k, v in DOOR_STATE_IDS.items()}


def visible_objects(obs: Observation) -> tuple[list[str], bool]:
    """Canonical, coordinate-free list of visible object names plus the carry flag."""
    return list(obs.object_names), obs.carrying_key


def _object_names(view: np.ndarray) -> tuple[str, ...]:
    ids = view[:, :, 0]
    found = set()
    if (ids == OBJECT_IDS["key"]).any():
        found.add("key")
    for state in set(view[:, :, 2][ids == OBJECT_IDS["door"]].tolist()):
        found.add(f"door({_STATE_NAMES[state]})")
    if (ids == OBJECT_IDS["goal"]).any():
        found.add("goal")
    if (ids == OBJECT_IDS["wall"]).any():
        found.add("wall")
    return tuple(name for name in _OBJECT_PRIORITY if name in found)


_GLYPHS = {Kind.EMPTY: ".", Kind.WALL: "#", Kind.KEY: "K", Kind.GOAL: "G"}
_DOOR_GLYPHS = {DoorState.LOCKED: "D", DoorState.CLOSED: "d", DoorState.OPEN: "/"}
_AGENT_GLYPHS = ">v<^"


def render(world: GridWorld) -> str:
    """Fixed-width text rendering, one character per cell."""
    lines = []
    for y in range(world.height):
        chars = []
        for x in range(world.width):
            if (x, y) == (world.pose.x, world.pose.y):
                chars.append(_AGENT_GLYPHS[world.pose.dir])
            elif world.kinds[y, x] == Kind.DOOR:
                chars.append(_DOOR_GLYPHS[world.door_state])
            else:
                chars.append(_GLYPHS[Kind(int(world.kinds[y, x]))])
        lines.append("".join(chars))
    return "\n".join(lines) + "\n"


def shortest_plan(world: GridWorld) -> list[Action] | None:
    """Breadth-first search for a shortest goal-reaching action sequence.

    Searches the product space (position, heading, carrying, door state) with
    its own transition model rather than calling ``step``, so it can serve as
    an independent solvability check. Drop and Done are never needed and are
    not expanded. Returns ``None`` if the goal is unreachable.
    """
    kinds = world.kinds
    key_cells = {(int(x), int(y)) for y, x in zip(*np.nonzero(kinds == Kind.KEY))}

    def is_free(x, y, door, carrying):
        k = kinds[y, x]
        if k == Kind.WALL:
            return False
        if k == Kind.DOOR:
            return door == DoorState.OPEN
        if k == Kind.KEY:
            return carrying  # picked up; the cell is now empty
        return True

    start = (world.pose.x, world.pose.y, world.pose.dir, world.carrying_key, world.door_state)
    parents = {start: None}
    queue = deque([start])
    while queue:
        state = queue.popleft()
        x, y, d, carrying, door = state
        if kinds[y, x] == Kind.GOAL:
            plan = []
            while parents[state] is not None:
                state, act = parents[state]
                plan.append(act)
            return plan[::-1]
        fx, fy = x + DIR_VEC[d][0], y + DIR_VEC[d][1]
        moves = [
            (Action.TURN_LEFT, (x, y, (d - 1) % 4, carrying, door)),
            (Action.TURN_RIGHT, (x, y, (d + 1) % 4, carrying, door)),
        ]
        if 0 <= fx < world.width and 0 <= fy < world.height:
            if is_free(fx, fy, door, carrying):
                moves.append((Action.FORWARD, (fx, fy, d, carrying, door)))
            if not carrying and (fx, fy) in key_cells:
                moves.append((Action.PICKUP, (x, y, d, True, door)))
            if (fx, fy) == world.door_pos:
                if door == DoorState.LOCKED and carrying:
                    moves.append((Action.TOGGLE, (x, y, d, carrying, DoorState.OPEN)))
                elif door == DoorState.CLOSED:
                    moves.append((Action.TOGGLE, (x, y, d, carrying, DoorState.OPEN)))
        for act, nxt in moves:
            if nxt not in parents:
                parents[nxt] = (state, act)
                queue.append(nxt)
    return None
