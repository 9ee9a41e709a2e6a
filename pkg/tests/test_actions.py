import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clutterplan.actions import (
    GraspAction,
    GraspGeometry,
    best_grasp,
    graspable,
    sample_pushes,
)
from clutterplan.bench import generate_case
from clutterplan.pushworld import (
    GripperTip,
    ObjectShape,
    Pose,
    WorldState,
    collides_gripper_start,
)

from conftest import lone_disc, ring_scene
from oracles import raster_grasp

TIP = GripperTip()
GEOM = GraspGeometry()


def test_lone_disc_pushes_closed_form():
    R = 0.02
    pushes = sample_pushes(lone_disc(R), 4)
    assert len(pushes) == 4
    d = R + TIP.radius + TIP.clearance
    for k, p in enumerate(pushes):
        a = math.pi / 2 * k
        assert p.x_s == pytest.approx(d * math.cos(a), abs=1e-8)
        assert p.y_s == pytest.approx(d * math.sin(a), abs=1e-8)
        # aimed at the center, trimmed to the push length
        assert p.length == pytest.approx(0.05, abs=1e-9)
        dx, dy = p.x_e - p.x_s, p.y_e - p.y_s
        assert -p.x_s * dy + p.y_s * dx == pytest.approx(0.0, abs=1e-12)
        assert -p.x_s * dx - p.y_s * dy > 0


def test_touching_discs_drop_blocked_starts():
    r = 0.02
    s = WorldState.from_objects([(ObjectShape.disc(r), Pose(-r, 0, 0)),
                                 (ObjectShape.disc(r), Pose(r + 1e-6, 0, 0))], 0)
    pushes = sample_pushes(s, 8)
    # brute force: place every candidate start and test it
    d = r + TIP.radius + TIP.clearance
    expected = 0
    for i in range(2):
        for k in range(8):
            a = 2 * math.pi * k / 8
            x, y = s.poses[i, 0] + d * math.cos(a), s.poses[i, 1] + d * math.sin(a)
            others = [s.poses[j, :2] for j in range(2) if j != i]
            if all(math.hypot(x - o[0], y - o[1]) > d for o in others):
                expected += 1
    assert len(pushes) == expected < 16
    assert all(not collides_gripper_start(s, p) for p in pushes)


def test_empty_scene_has_no_pushes():
    assert sample_pushes(WorldState([], [], 0), 16) == []


def test_lone_disc_grasp():
    rep = graspable(lone_disc())
    assert rep.graspable and math.isinf(rep.margin)
    assert rep.best == GraspAction(0.0, 0.0, 0)
    assert best_grasp(lone_disc(0.02, 0.03, -0.01)) == GraspAction(0.03, -0.01, 0)


def test_ringed_target_blocked():
    s = ring_scene(6)
    rep = graspable(s)
    assert not rep.graspable and rep.margin == 0.0 and rep.best is None
    assert best_grasp(s) is None
    assert raster_grasp(s, GEOM) == (False, False)


@pytest.mark.parametrize("phase,expected", [(math.pi / 2, {4, 12}), (0.0, {0, 8})])
def test_corridor_grasp(phase, expected):
    # removing an opposite pair opens a corridor through the ring
    s = ring_scene(6, phase=phase, drop=(0, 3))
    rep = graspable(s)
    assert rep.graspable
    assert rep.best.angle_index in expected
    assert raster_grasp(s, GEOM) == (True, False)


def test_target_wider_than_opening():
    s = WorldState.from_objects([(ObjectShape.disc(0.05), Pose(0, 0, 0))], 0)
    assert not graspable(s).graspable
    assert best_grasp(s) is None


def test_grasp_blocked_by_wall():
    ws_half = 0.144
    s = lone_disc(0.02, ws_half - 0.021, ws_half - 0.021)
    assert not graspable(s, margin_threshold=0).graspable


def test_geometry_validation():
    with pytest.raises(ValueError):
        GraspGeometry(opening=0)
    with pytest.raises(ValueError):
        GraspGeometry(n_angles=15)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 10), t1=st.floats(0, 0.02), t2=st.floats(0, 0.02))
def test_threshold_monotone_and_consistent(seed, n, t1, t2):
    s = generate_case(n, "mixed", seed)
    lo, hi = sorted((t1, t2))
    if graspable(s, GEOM, hi).graspable:
        assert graspable(s, GEOM, lo).graspable
    rep = graspable(s, GEOM, 0.0)
    assert (best_grasp(s) is not None) == rep.graspable
    if rep.graspable:
        assert rep.margin > 0 and rep.best is not None


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 10), drop=st.integers(0, 100))
def test_removing_obstacle_never_hurts(seed, n, drop):
    s = generate_case(n, "mixed", seed)
    others = [i for i in range(n) if i != s.target_index]
    j = others[drop % len(others)]
    objs = [o for i, o in enumerate(s.objects) if i != j]
    t = s.target_index - (1 if j < s.target_index else 0)
    fewer = WorldState.from_objects(objs, t)
    a, b = graspable(s), graspable(fewer)
    assert b.margin >= a.margin
    assert b.graspable or not a.graspable


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 12), k=st.integers(1, 16))
def test_sampler_validity(seed, n, k):
    s = generate_case(n, "mixed", seed)
    pushes = sample_pushes(s, k)
    assert len(pushes) <= n * k
    for p in pushes:
        assert not collides_gripper_start(s, p)
        assert p.length == pytest.approx(0.05, abs=1e-9)
        assert all(abs(v) < s.workspace.half for v in p)
    assert sample_pushes(s, k) == pushes
