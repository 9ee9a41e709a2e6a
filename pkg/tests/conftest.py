import math

import pytest

from clutterplan.pushworld import ObjectShape, Pose, WorldState


def ring_scene(n=6, r_target=0.015, r_ring=0.018, dist=0.036, drop=(), phase=0.0, center=(0.0, 0.0)):
    """Target disc (index 0) with ``n`` discs evenly spaced around it."""
    cx, cy = center
    objs = [(ObjectShape.disc(r_target), Pose(cx, cy, 0.0))]
    for k in range(n):
        if k in drop:
            continue
        a = phase + 2 * math.pi * k / n
        objs.append((ObjectShape.disc(r_ring), Pose(cx + dist * math.cos(a), cy + dist * math.sin(a), 0.0)))
    state = WorldState.from_objects(objs, 0)
    state.validate()
    return state


def open_ring():
    """Ring loose enough that a single push can open a grasp corridor."""
    return ring_scene(6, r_ring=0.016, dist=0.0321)


def lone_disc(r=0.02, x=0.0, y=0.0):
    return WorldState.from_objects([(ObjectShape.disc(r), Pose(x, y, 0.0))], 0)


@pytest.fixture
def ring6():
    return ring_scene()


# (criterion number, passed, detail) lines collected by test_acceptance
ACCEPTANCE = []


def record(number, passed, detail):
    ACCEPTANCE.append((number, passed, detail))
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} - {detail}")
