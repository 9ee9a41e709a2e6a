"""Planar quasi-static push world.

A :class:`WorldState` is an immutable snapshot: object shapes, their poses and
which object is the target.  :func:`resolve_push` is the transition function;
:func:`batch_resolve` applies it to many independent states on a thread pool.
Coordinates are meters with the workspace centered on the origin.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from clutterplan import _kernels as K


class WorldError(ValueError):
    """Invalid scene, pose or push."""


class ResolutionError(RuntimeError):
    """A push could not be resolved to a non-penetrating state."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class BatchError(RuntimeError):
    """Raised by batch operations when some elements failed.

    ``errors`` maps element index to the exception raised for it; the other
    elements completed normally and are available in ``results``.
    """

    def __init__(self, errors: dict, results: list):
        super().__init__(f"{len(errors)} of {len(results)} batch elements failed")
        self.errors = errors
        self.results = results


@dataclass(frozen=True)
class Workspace:
    side_length: float = 0.288
    boundary_margin: float = 0.0
    grid_resolution: int = 144

    def __post_init__(self):
        if not self.side_length > 0:
            raise WorldError("side_length must be positive")
        if self.grid_resolution < 16:
            raise WorldError("grid_resolution must be at least 16")
        if self.boundary_margin < 0 or self.boundary_margin >= self.side_length / 2:
            raise WorldError("boundary_margin out of range")

    @property
    def half(self) -> float:
        return self.side_length / 2


@dataclass(frozen=True)
class GripperTip:
    radius: float = 0.012
    clearance: float = 0.002

    def __post_init__(self):
        if not self.radius > 0 or self.clearance < 0:
            raise WorldError("tip radius must be positive and clearance non-negative")


@dataclass(frozen=True)
class PhysicsConfig:
    """Tunables of the substep projection model."""

    push_distance: float = 0.05
    substeps: int = 64
    max_iterations: int = 32
    eps_pen: float = 1e-4
    k_rot: float = 1.0
    clamp_eps: float = 1e-6


@dataclass(frozen=True)
class ObjectShape:
    kind: str
    radius: float | None = None
    vertices: tuple | None = None

    def __post_init__(self):
        if self.kind == "disc":
            if self.radius is None or not self.radius > 0:
                raise WorldError("disc radius must be positive")
        elif self.kind == "polygon":
            verts = tuple((float(x), float(y)) for x, y in self.vertices or ())
            object.__setattr__(self, "vertices", verts)
            _check_convex(verts)
        else:
            raise WorldError(f"unknown shape kind {self.kind!r}")

    @classmethod
    def disc(cls, radius: float) -> ObjectShape:
        return cls("disc", radius=float(radius))

    @classmethod
    def polygon(cls, vertices) -> ObjectShape:
        return cls("polygon", vertices=tuple(vertices))

    @classmethod
    def regular(cls, n_sides: int, circumradius: float, phase: float = 0.0) -> ObjectShape:
        return cls.polygon(
            (circumradius * math.cos(phase + 2 * math.pi * k / n_sides),
             circumradius * math.sin(phase + 2 * math.pi * k / n_sides))
            for k in range(n_sides)
        )

    @property
    def bounding_radius(self) -> float:
        if self.kind == "disc":
            return self.radius
        return max(math.hypot(x, y) for x, y in self.vertices)

    def to_json(self) -> dict:
        if self.kind == "disc":
            return {"kind": "disc", "radius": self.radius}
        return {"kind": "polygon", "vertices": [list(v) for v in self.vertices]}


def _check_convex(verts):
    if len(verts) < 3:
        raise WorldError("polygon needs at least 3 vertices")
    m = len(verts)
    for k in range(m):
        ax, ay = verts[k]
        bx, by = verts[(k + 1) % m]
        cx, cy = verts[(k + 2) % m]
        if (bx - ax) * (cy - by) - (by - ay) * (cx - bx) <= 0:
            raise WorldError("polygon must be convex, non-degenerate and counter-clockwise")
        # the local origin (object center) must lie strictly inside
        if (bx - ax) * (0 - ay) - (by - ay) * (0 - ax) <= 0:
            raise WorldError("polygon must contain its local origin")


class Pose(NamedTuple):
    x: float
    y: float
    theta: float = 0.0


class PushAction(NamedTuple):
    x_s: float
    y_s: float
    x_e: float
    y_e: float

    @property
    def length(self) -> float:
        return math.hypot(self.x_e - self.x_s, self.y_e - self.y_s)


class Layout:
    """Shape arrays shared by every state of one scene."""

    def __init__(self, shapes: tuple):
        n = len(shapes)
        width = max([3] + [len(s.vertices) for s in shapes if s.kind == "polygon"])
        self.kinds = np.zeros(n, np.int64)
        self.radii = np.zeros(n)
        self.verts = np.zeros((n, width, 2))
        self.nverts = np.zeros(n, np.int64)
        for i, s in enumerate(shapes):
            self.radii[i] = s.bounding_radius
            if s.kind == "polygon":
                self.kinds[i] = K.POLYGON
                self.nverts[i] = len(s.vertices)
                self.verts[i, : len(s.vertices)] = s.vertices
        for arr in (self.kinds, self.radii, self.verts, self.nverts):
            arr.flags.writeable = False

    @property
    def arrays(self):
        return self.kinds, self.radii, self.verts, self.nverts

    @functools.lru_cache(maxsize=16)
    def offsets(self, n_angles: int, clearance_radius: float) -> np.ndarray:
        out = K.contour_offsets(self.kinds, self.radii, self.verts, self.nverts,
                                n_angles, clearance_radius)
        out.flags.writeable = False
        return out


@functools.lru_cache(maxsize=256)
def layout_for(shapes: tuple) -> Layout:
    return Layout(shapes)


class WorldState:
    """Immutable scene snapshot."""

    __slots__ = ("shapes", "poses", "target_index", "workspace", "layout", "_digest")

    def __init__(self, shapes, poses, target_index: int, workspace: Workspace = Workspace()):
        shapes = tuple(shapes)
        arr = np.array(poses, dtype=np.float64).reshape(len(shapes), 3)
        if not np.all(np.isfinite(arr)):
            raise WorldError("poses must be finite")
        if len(shapes) and not 0 <= target_index < len(shapes):
            raise WorldError("target_index out of range")
        arr.flags.writeable = False
        self.shapes = shapes
        self.poses = arr
        self.target_index = int(target_index)
        self.workspace = workspace
        self.layout = layout_for(shapes)
        self._digest = None

    @classmethod
    def from_objects(cls, objects, target_index: int, workspace: Workspace = Workspace()):
        objects = list(objects)
        poses = [tuple(p) if len(p) == 3 else (p[0], p[1], 0.0) for _, p in objects]
        poses = [(x, y, float(K.wrap_angle(t))) for x, y, t in poses]
        return cls([s for s, _ in objects], poses, target_index, workspace)

    def with_poses(self, poses) -> WorldState:
        out = WorldState.__new__(WorldState)
        arr = np.asarray(poses, dtype=np.float64)
        arr.flags.writeable = False
        out.shapes = self.shapes
        out.poses = arr
        out.target_index = self.target_index
        out.workspace = self.workspace
        out.layout = self.layout
        out._digest = None
        return out

    @property
    def objects(self) -> list:
        return [(s, Pose(*map(float, p))) for s, p in zip(self.shapes, self.poses)]

    @property
    def n_objects(self) -> int:
        return len(self.shapes)

    def pose(self, i: int) -> Pose:
        return Pose(*map(float, self.poses[i]))

    def digest(self) -> str:
        if self._digest is None:
            h = hashlib.sha256(self.poses.tobytes())
            h.update(str(self.target_index).encode())
            self._digest = h.hexdigest()
        return self._digest

    def max_penetration(self) -> float:
        if self.n_objects < 2:
            return 0.0
        return float(K.max_penetration(self.poses, *self.layout.arrays))

    def validate(self, eps_pen: float = PhysicsConfig.eps_pen):
        if not in_bounds(self):
            raise WorldError("object center outside the workspace")
        pen = self.max_penetration()
        if pen > eps_pen:
            raise WorldError(f"objects overlap (max penetration {pen:.3g} m)")

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        return (self.shapes == other.shapes and self.target_index == other.target_index
                and self.workspace == other.workspace
                and self.poses.tobytes() == other.poses.tobytes())

    def __hash__(self):
        return hash(self.digest())

    def __repr__(self):
        return f"WorldState(n_objects={self.n_objects}, target={self.target_index}, digest={self.digest()[:10]})"

    def to_json(self) -> dict:
        return {
            "workspace": {"side_length": self.workspace.side_length,
                          "boundary_margin": self.workspace.boundary_margin},
            "objects": [dict(s.to_json(), pose=[float(v) for v in p])
                        for s, p in zip(self.shapes, self.poses)],
            "target_index": self.target_index,
        }

    @classmethod
    def from_json(cls, doc: dict) -> WorldState:
        try:
            ws = Workspace(**doc.get("workspace", {}))
            objects = []
            for obj in doc["objects"]:
                kind = obj["kind"]
                if kind == "disc":
                    shape = ObjectShape.disc(obj["radius"])
                elif kind == "polygon":
                    shape = ObjectShape.polygon(obj["vertices"])
                else:
                    raise WorldError(f"unknown object kind {kind!r}")
                pose = obj.get("pose", [0.0, 0.0, 0.0])
                objects.append((shape, Pose(*map(float, pose))))
            state = cls.from_objects(objects, int(doc["target_index"]), ws)
        except (KeyError, TypeError) as exc:
            raise WorldError(f"malformed scene document: {exc}") from exc
        state.validate()
        return state


def load_scene(path) -> WorldState:
    return WorldState.from_json(json.loads(Path(path).read_text()))


def save_scene(state: WorldState, path):
    Path(path).write_text(json.dumps(state.to_json(), indent=1) + "\n")


def physics_params(workspace: Workspace, tip: GripperTip = GripperTip(),
                   physics: PhysicsConfig = PhysicsConfig(), grasp=None,
                   threshold: float = 0.0, n_angles: int = 16) -> np.ndarray:
    """Pack settings into the float vector the kernels read."""
    p = np.zeros(K.N_PARAMS)
    p[K.P_HALF] = workspace.half
    p[K.P_MARGIN] = workspace.boundary_margin
    p[K.P_TIP_R] = tip.radius
    p[K.P_CLEARANCE] = tip.clearance
    p[K.P_PUSH] = physics.push_distance
    p[K.P_SUBSTEPS] = physics.substeps
    p[K.P_MAX_ITER] = physics.max_iterations
    p[K.P_EPS_PEN] = physics.eps_pen
    p[K.P_K_ROT] = physics.k_rot
    p[K.P_CLAMP_EPS] = physics.clamp_eps
    if grasp is not None:
        p[K.P_FINGER_WIDTH] = grasp.finger_width
        p[K.P_FINGER_THICK] = grasp.finger_thickness
        p[K.P_OPENING] = grasp.opening
        p[K.P_K] = grasp.n_angles
    p[K.P_THRESHOLD] = threshold
    p.flags.writeable = False
    return p


def in_bounds(state: WorldState) -> bool:
    lim = state.workspace.half - state.workspace.boundary_margin
    return bool(np.all(np.abs(state.poses[:, :2]) < lim))


def collides_gripper_start(state: WorldState, push: PushAction, tip: GripperTip = GripperTip()) -> bool:
    half = state.workspace.half
    if abs(push.x_s) > half or abs(push.y_s) > half:
        return True
    if state.n_objects == 0:
        return False
    scratch = np.empty((state.layout.verts.shape[1], 2))
    return bool(K.circle_collides(push.x_s, push.y_s, tip.radius + tip.clearance,
                                  state.poses, *state.layout.arrays, scratch))


def resolve_push(state: WorldState, push: PushAction, tip: GripperTip = GripperTip(),
                 physics: PhysicsConfig = PhysicsConfig(), *, check: bool = True) -> WorldState:
    """Apply one push and return the resulting state.

    The tip sweeps the segment in ``physics.substeps`` increments.  A push that
    jams against the workspace wall stops early at the last resolvable
    substep; see ``_kernels.resolve_push``.
    """
    if check:
        if collides_gripper_start(state, push, tip):
            raise WorldError("push start collides with an object or leaves the workspace")
        half = state.workspace.half
        if abs(push.x_e) > half or abs(push.y_e) > half:
            raise WorldError("push end lies outside the workspace")
    if state.n_objects == 0:
        return state
    params = physics_params(state.workspace, tip, physics)
    poses, _ = K.resolve_push(state.poses, *state.layout.arrays, params, *push)
    if check:
        residual = float(K.max_penetration(poses, *state.layout.arrays))
        if residual > physics.eps_pen:
            raise ResolutionError(f"push left objects penetrating by {residual:.3g} m", residual)
    return state.with_poses(poses)


def _chunks(n: int, parts: int) -> list:
    parts = max(1, min(parts, n))
    bounds = [n * k // parts for k in range(parts + 1)]
    return [range(bounds[k], bounds[k + 1]) for k in range(parts)]


def map_ordered(fn, items: Sequence, workers: int = 1, executor: ThreadPoolExecutor | None = None):
    """``[fn(x) for x in items]`` evaluated on a thread pool in contiguous chunks.

    Output order is the input order; exceptions are returned in place instead
    of raised so one bad element cannot hide the others.
    """

    def run(idx):
        out = []
        for i in idx:
            try:
                out.append(fn(items[i]))
            except Exception as exc:  # noqa: BLE001 - reported per element
                out.append(exc)
        return out

    if workers <= 1 or len(items) <= 1:
        return run(range(len(items)))
    chunks = _chunks(len(items), workers)
    if executor is None:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = list(executor.map(run, chunks))
    return [r for part in parts for r in part]


def batch_resolve(states: Sequence[WorldState], pushes: Sequence[PushAction],
                  tip: GripperTip = GripperTip(), physics: PhysicsConfig = PhysicsConfig(),
                  workers: int = 1, return_exceptions: bool = False) -> list:
    """Element-wise :func:`resolve_push` over a worker pool.

    Every element is attempted.  With ``return_exceptions`` failed elements
    hold their exception; otherwise a :class:`BatchError` is raised after the
    whole batch has run.
    """
    if len(states) != len(pushes):
        raise ValueError("states and pushes must have equal length")
    pairs = list(zip(states, pushes))
    results = map_ordered(lambda sp: resolve_push(sp[0], sp[1], tip, physics), pairs, workers)
    errors = {i: r for i, r in enumerate(results) if isinstance(r, Exception)}
    if errors and not return_exceptions:
        raise BatchError(errors, results)
    return results
