import numpy as np
import pytest

from doorkey_im.gridworld import AgentPose, DoorState, GridWorld, Kind, max_steps_for

_KINDS = {".": Kind.EMPTY, "#": Kind.WALL, "K": Kind.KEY, "G": Kind.GOAL}
_DOORS = {"D": DoorState.LOCKED, "d": DoorState.CLOSED, "/": DoorState.OPEN}
_AGENT = ">v<^"


def world_from_text(text: str, carrying: bool = False, max_steps: int | None = None) -> GridWorld:
    """Build a world from the same glyphs ``render`` emits (one door at most)."""
    rows = [r for r in text.strip("\n").splitlines()]
    height, width = len(rows), len(rows[0])
    kinds = np.zeros((height, width), dtype=np.int8)
    door_pos, door_state, pose = (-1, -1), DoorState.LOCKED, None
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch in _AGENT:
                pose = AgentPose(x, y, _AGENT.index(ch))
                kinds[y, x] = Kind.EMPTY
            elif ch in _DOORS:
                kinds[y, x] = Kind.DOOR
                door_pos, door_state = (x, y), _DOORS[ch]
            else:
                kinds[y, x] = _KINDS[ch]
    return GridWorld(width, height, kinds, door_pos, door_state, pose,
                     max_steps or max_steps_for(max(width, height)), 0, carrying_key=carrying)


@pytest.fixture
def make_world():
    return world_from_text


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[key])
