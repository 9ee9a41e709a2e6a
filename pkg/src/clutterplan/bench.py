"""Episodes, case corpus and benchmark sweeps.

An episode alternates planning and execution on a live state: grasp as soon
as the target passes the graspability threshold, otherwise plan one push,
apply it, and repeat until the action cap.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from clutterplan import streams
from clutterplan.actions import best_grasp, graspable
from clutterplan.mcts import SearchConfig, SearchError, serial_search
from clutterplan.pmbs import ParallelConfig, pmbs_search
from clutterplan.pushworld import (
    ObjectShape,
    Pose,
    PushAction,
    WorldError,
    WorldState,
    Workspace,
    load_scene,
    resolve_push,
    save_scene,
)

log = logging.getLogger(__name__)

CASES_DIR = Path(__file__).with_name("cases")

CSV_COLUMNS = ["case_id", "trial", "planner", "n_envs", "budget", "actions_used",
               "planning_time_s", "completed", "grasp_success"]


@dataclass
class EpisodeResult:
    case_id: str
    trial: int
    planner: str
    actions_used: int
    planning_time_s: float
    completed: bool
    grasp_success: bool
    grasp_attempts: int = 0
    pushes: int = 0
    marginal_grasp: bool = False
    steps: list = field(default_factory=list, repr=False)


@dataclass
class BenchmarkConfig:
    case_paths: list = field(default_factory=list)
    planner: str = "pmbs"
    search: ParallelConfig = field(default_factory=lambda: ParallelConfig(time_budget=8.0))
    trials: int = 5
    action_cap: int = 16
    seed_base: int = 0
    output: str | None = None
    log_dir: str | None = None
    # wall-clock columns break byte-for-byte reproducibility
    record_timing: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.planner not in ("serial", "pmbs"):
            raise ValueError("planner must be 'serial' or 'pmbs'")
        if self.action_cap < 1:
            raise ValueError("action_cap must be >= 1")


# ---------------------------------------------------------------- generation

def _random_shape(rng: np.random.Generator, polygon: bool) -> ObjectShape:
    if not polygon:
        return ObjectShape.disc(float(rng.uniform(0.014, 0.022)))
    kind = int(rng.integers(0, 3))
    if kind == 0:
        half_w = float(rng.uniform(0.012, 0.02))
        half_h = float(rng.uniform(0.01, 0.016))
        return ObjectShape.polygon([(-half_w, -half_h), (half_w, -half_h),
                                    (half_w, half_h), (-half_w, half_h)])
    sides = 3 if kind == 1 else 6
    return ObjectShape.regular(sides, float(rng.uniform(0.016, 0.023)),
                               float(rng.uniform(0, 2 * math.pi)))


def _fits(shape, pose, placed, workspace, gap):
    lim = workspace.half - workspace.boundary_margin - shape.bounding_radius
    if abs(pose[0]) >= lim or abs(pose[1]) >= lim:
        return False
    trial = WorldState([s for s, _ in placed] + [shape], [p for _, p in placed] + [pose], 0,
                       workspace)
    return trial.n_objects < 2 or _min_gap(trial, len(placed)) > gap


def _min_gap(state: WorldState, i: int) -> float:
    """Smallest clearance between object ``i`` and the others (negative = overlap)."""
    from clutterplan import _kernels as K

    lay = state.layout
    wv = np.zeros_like(lay.verts)
    for j in range(state.n_objects):
        if lay.kinds[j] == K.POLYGON:
            K.world_vertices(lay.verts[j], lay.nverts[j], *state.poses[j], wv[j])
    best = math.inf
    for j in range(state.n_objects):
        if j == i:
            continue
        pi, pj = state.poses[i], state.poses[j]
        if math.hypot(pi[0] - pj[0], pi[1] - pj[1]) - lay.radii[i] - lay.radii[j] > best:
            continue
        if lay.kinds[i] == K.DISC and lay.kinds[j] == K.DISC:
            d = math.hypot(pi[0] - pj[0], pi[1] - pj[1]) - lay.radii[i] - lay.radii[j]
        elif lay.kinds[i] == K.DISC:
            d = K.point_polygon(pi[0], pi[1], wv[j], lay.nverts[j])[0] - lay.radii[i]
        elif lay.kinds[j] == K.DISC:
            d = K.point_polygon(pj[0], pj[1], wv[i], lay.nverts[i])[0] - lay.radii[j]
        else:
            d = K.polygon_distance(wv[i], lay.nverts[i], wv[j], lay.nverts[j],
                                   pi[0], pi[1], pj[0], pj[1])
        best = min(best, d)
    return best


def generate_case(n_objects: int, shape_mix="mixed", rng_seed: int = 0,
                  workspace: Workspace = Workspace(), spread: float = 0.035,
                  gap: float = 0.001, max_attempts: int = 10_000) -> WorldState:
    """Rejection-sample a cluttered pile around the workspace center.

    ``shape_mix`` is "discs", "polygons", "mixed" (half polygons) or the
    probability that an object is a polygon.  The object nearest the center
    becomes the target.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    p_poly = {"discs": 0.0, "polygons": 1.0, "mixed": 0.5}.get(shape_mix, shape_mix)
    p_poly = float(p_poly)
    rng = np.random.default_rng(rng_seed)
    placed = []
    attempts = 0
    while len(placed) < n_objects:
        shape = _random_shape(rng, bool(rng.random() < p_poly))
        for _ in range(100):
            attempts += 1
            if attempts > max_attempts:
                raise WorldError(f"could not place {n_objects} objects in {max_attempts} attempts")
            x, y = rng.normal(0.0, spread, size=2)
            pose = Pose(float(x), float(y), 0.0 if shape.kind == "disc"
                        else float(rng.uniform(-math.pi, math.pi)))
            if _fits(shape, pose, placed, workspace, gap):
                placed.append((shape, pose))
                break
    target = min(range(n_objects), key=lambda i: math.hypot(placed[i][1].x, placed[i][1].y))
    state = WorldState.from_objects(placed, target, workspace)
    state.validate()
    return state


def ring_case(n_ring: int, n_extra: int, rng_seed: int, center=(0.0, 0.0),
              workspace: Workspace = Workspace(), scatter: float = 0.02) -> WorldState:
    """Target disc encircled by ``n_ring`` discs plus clutter outside.

    A small ``scatter`` packs the extra objects right behind the ring.
    """
    rng = np.random.default_rng(rng_seed)
    r_t = float(rng.uniform(0.015, 0.019))
    r_n = float(rng.uniform(0.014, 0.018))
    ring_r = r_t + r_n + float(rng.uniform(0.0015, 0.004))
    # a ring of touching neighbours needs room for n_ring of them
    ring_r = max(ring_r, (r_n + 0.0008) / math.sin(math.pi / n_ring))
    phase = float(rng.uniform(0, 2 * math.pi))
    cx, cy = center
    placed = [(ObjectShape.disc(r_t), Pose(cx, cy, 0.0))]
    for k in range(n_ring):
        a = phase + 2 * math.pi * k / n_ring
        placed.append((ObjectShape.disc(r_n), Pose(cx + ring_r * math.cos(a),
                                                    cy + ring_r * math.sin(a), 0.0)))
    attempts = 0
    while len(placed) < 1 + n_ring + n_extra:
        shape = _random_shape(rng, bool(rng.random() < 0.5))
        attempts += 1
        if attempts > 10_000:
            raise WorldError("could not place ring clutter")
        a = rng.uniform(0, 2 * math.pi)
        d = ring_r + r_n + shape.bounding_radius + abs(rng.normal(0.0, scatter))
        pose = Pose(cx + d * math.cos(a), cy + d * math.sin(a),
                    0.0 if shape.kind == "disc" else float(rng.uniform(-math.pi, math.pi)))
        if _fits(shape, pose, placed, workspace, 0.001):
            placed.append((shape, pose))
    state = WorldState.from_objects(placed, 0, workspace)
    state.validate()
    return state


def wall_case(n_objects: int, rng_seed: int, workspace: Workspace = Workspace()) -> WorldState:
    """Target pressed toward a wall with clutter packed on its open side."""
    rng = np.random.default_rng(rng_seed)
    side = int(rng.integers(0, 4))
    r_t = float(rng.uniform(0.015, 0.019))
    along = float(rng.uniform(-0.05, 0.05))
    off = workspace.half - r_t - float(rng.uniform(0.02, 0.03))

    def to_world(u, v):
        # rotate the "top wall" layout onto the chosen side
        for _ in range(side):
            u, v = -v, u
        return u, v

    placed = [(ObjectShape.disc(r_t), Pose(*to_world(along, off), 0.0))]
    attempts = 0
    while len(placed) < n_objects:
        attempts += 1
        if attempts > 10_000:
            raise WorldError("could not place wall clutter")
        shape = _random_shape(rng, bool(rng.random() < 0.5))
        u = along + rng.normal(0.0, 0.035)
        v = off - abs(rng.normal(0.0, 0.04)) + rng.normal(0.0, 0.01)
        pose = Pose(*to_world(float(u), float(v)),
                    0.0 if shape.kind == "disc" else float(rng.uniform(-math.pi, math.pi)))
        if _fits(shape, pose, placed, workspace, 0.001):
            placed.append((shape, pose))
    state = WorldState.from_objects(placed, 0, workspace)
    state.validate()
    return state


def shipped_cases() -> dict:
    """The bundled case corpus, keyed by case id."""
    return {p.stem: load_scene(p) for p in sorted(CASES_DIR.glob("*.json"))}


def case_paths(directory=None) -> list:
    directory = Path(directory) if directory else CASES_DIR
    return sorted(directory.glob("*.json"))


# ---------------------------------------------------------------- episodes

def plan_once(state: WorldState, cfg: BenchmarkConfig, seed: int):
    search = cfg.search.replace(rng_seed=seed)
    if cfg.planner == "serial":
        return serial_search(state, search)
    return pmbs_search(state, search)


def run_episode(case: WorldState, cfg: BenchmarkConfig, rng: int = 0, case_id: str = "case",
                trial: int = 0) -> EpisodeResult:
    """Play one retrieval episode on ``case``.

    ``rng`` seeds the planner; planning step ``k`` searches with a stream
    derived from ``(rng, k)``.
    """
    case.validate()
    search = cfg.search
    live = case
    result = EpisodeResult(case_id, trial, cfg.planner, 0, 0.0, False, False)
    while result.actions_used < cfg.action_cap:
        pre = live.digest()
        report = graspable(live, search.grasp, search.margin_threshold)
        if report.graspable:
            grasp = best_grasp(live, search.grasp)
            result.actions_used += 1
            result.grasp_attempts += 1
            result.grasp_success = grasp is not None
            result.completed = result.grasp_success
            result.marginal_grasp = report.margin < 2 * search.margin_threshold
            result.steps.append({"step": result.actions_used, "kind": "grasp",
                                 "grasp": list(grasp) if grasp else None,
                                 "margin": report.margin if math.isfinite(report.margin) else None,
                                 "pre": pre, "post": pre})
            break
        seed = streams.stream_seed(rng, streams.EPISODE, result.actions_used)
        t0 = time.perf_counter()
        try:
            found = plan_once(live, cfg, seed)
        except SearchError as exc:
            result.planning_time_s += time.perf_counter() - t0
            log.info("%s trial %d: planner gave up: %s", case_id, trial, exc)
            break
        result.planning_time_s += time.perf_counter() - t0
        push = found.action
        live = resolve_push(live, push, search.tip, search.physics)
        result.actions_used += 1
        result.pushes += 1
        result.steps.append({"step": result.actions_used, "kind": "push", "push": list(push),
                             "iterations": found.iterations, "stop": found.stop_reason,
                             "pre": pre, "post": live.digest()})
    return result


def episode_seed(seed_base: int, case_id: str, trial: int) -> int:
    return (seed_base + zlib.crc32(f"{case_id}/{trial}".encode())) & ((1 << 64) - 1)


def write_episode_log(path, case: WorldState, result: EpisodeResult, cfg: BenchmarkConfig):
    with open(path, "w") as fh:
        head = {"case_id": result.case_id, "trial": result.trial, "planner": result.planner,
                "scene": case.to_json(), "physics": asdict(cfg.search.physics),
                "tip": asdict(cfg.search.tip)}
        fh.write(json.dumps(head) + "\n")
        for step in result.steps:
            fh.write(json.dumps(step) + "\n")


def replay(path) -> dict:
    """Re-execute an episode log and check every recorded state digest."""
    from clutterplan.pushworld import GripperTip, PhysicsConfig

    lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty episode log")
    head, steps = lines[0], lines[1:]
    state = WorldState.from_json(head["scene"])
    tip = GripperTip(**head.get("tip", {}))
    physics = PhysicsConfig(**head.get("physics", {}))
    mismatches = []
    for step in steps:
        if state.digest() != step["pre"]:
            mismatches.append(step["step"])
        if step["kind"] == "push":
            try:
                state = resolve_push(state, PushAction(*step["push"]), tip, physics)
            except WorldError:
                mismatches.append(step["step"])
                break
        if state.digest() != step["post"]:
            mismatches.append(step["step"])
    return {"steps": len(steps), "mismatches": mismatches, "ok": not mismatches,
            "final_digest": state.digest()}


# ---------------------------------------------------------------- sweeps

def _budget_label(search: SearchConfig) -> str:
    if search.max_iterations is not None:
        return f"iters:{search.max_iterations}"
    if search.max_expansions is not None:
        return f"expansions:{search.max_expansions}"
    return f"{search.time_budget:g}s"


def summarize(rows: list) -> dict:
    if not rows:
        return {}
    times = [float(r["planning_time_s"]) for r in rows if r["planning_time_s"] not in ("", "NA")]
    attempts = sum(int(r.get("grasp_attempts", 1 if r["completed"] else 0)) for r in rows)
    successes = sum(1 for r in rows if str(r["grasp_success"]) in ("1", "True"))
    return {
        "mean_actions_used": sum(int(r["actions_used"]) for r in rows) / len(rows),
        "mean_planning_time_s": sum(times) / len(times) if times else float("nan"),
        "completion_rate": sum(1 for r in rows if str(r["completed"]) in ("1", "True")) / len(rows),
        "grasp_success_rate": successes / attempts if attempts else float("nan"),
    }


def read_results(path) -> tuple:
    """Parse a results CSV into (rows, summary)."""
    text = Path(path).read_text()
    body, _, tail = text.partition("\n# summary\n")
    rows = list(csv.DictReader(io.StringIO(body)))
    summary = {}
    for line in tail.splitlines()[1:]:
        if line.strip():
            k, v = line.split(",", 1)
            summary[k] = float(v)
    return rows, summary


def run_benchmark(cfg: BenchmarkConfig) -> list:
    """Run every case ``cfg.trials`` times, streaming one CSV row per episode.

    A ``# summary`` block with the mean metrics is appended at the end.  Rows
    already written survive an interruption.
    """
    paths = [Path(p) for p in cfg.case_paths]
    if not paths:
        raise ValueError("no cases given")
    cases = [(p.stem, load_scene(p)) for p in paths]
    out_fh = open(cfg.output, "w", newline="") if cfg.output else None
    rows = []
    try:
        writer = None
        if out_fh:
            writer = csv.DictWriter(out_fh, CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            out_fh.flush()
        for case_id, case in cases:
            for trial in range(cfg.trials):
                seed = episode_seed(cfg.seed_base, case_id, trial)
                res = run_episode(case, cfg, seed, case_id, trial)
                row = {
                    "case_id": case_id, "trial": trial, "planner": cfg.planner,
                    "n_envs": cfg.search.n_envs if cfg.planner == "pmbs" else 1,
                    "budget": _budget_label(cfg.search),
                    "actions_used": res.actions_used,
                    "planning_time_s": f"{res.planning_time_s:.4f}" if cfg.record_timing else "NA",
                    "completed": int(res.completed),
                    "grasp_success": int(res.grasp_success),
                }
                rows.append(dict(row, grasp_attempts=res.grasp_attempts))
                log.info("%s", row)
                if writer:
                    writer.writerow(row)
                    out_fh.flush()
                if cfg.log_dir:
                    Path(cfg.log_dir).mkdir(parents=True, exist_ok=True)
                    write_episode_log(Path(cfg.log_dir) / f"{case_id}_t{trial}_{cfg.planner}.jsonl",
                                      case, res, cfg)
        if out_fh:
            out_fh.write("\n# summary\nmetric,value\n")
            for k, v in summarize(rows).items():
                out_fh.write(f"{k},{v:.6f}\n")
    finally:
        if out_fh:
            out_fh.close()
    return rows


# (case id, motif, generator arguments); graded from loose piles to cornered rings
CORPUS_RECIPE = [
    ("c01_pile7", "pile", dict(n_objects=7, spread=0.03)),
    ("c02_pile8", "pile", dict(n_objects=8, spread=0.03)),
    ("c03_wall7", "wall", dict(n_objects=7)),
    ("c04_pile9", "pile", dict(n_objects=9, spread=0.03)),
    ("c05_wall8", "wall", dict(n_objects=8)),
    ("c06_ring5", "ring", dict(n_ring=5, n_extra=2)),
    ("c07_pile10", "pile", dict(n_objects=10, spread=0.03)),
    ("c08_wall9", "wall", dict(n_objects=9)),
    ("c09_ring6", "ring", dict(n_ring=6, n_extra=3)),
    ("c10_pile11", "pile", dict(n_objects=11, spread=0.03)),
    ("c11_wall10", "wall", dict(n_objects=10)),
    ("c12_ring7", "ring", dict(n_ring=7, n_extra=3)),
    ("c13_pile12", "pile", dict(n_objects=12, spread=0.03)),
    ("c14_wall11", "wall", dict(n_objects=11)),
    ("c15_ring7c", "ring", dict(n_ring=7, n_extra=2, center=(0.085, 0.085))),
    ("c16_ring6t", "ring", dict(n_ring=6, n_extra=5, scatter=0.002)),
    ("c17_wall12", "wall", dict(n_objects=12)),
    ("c18_ring7t", "ring", dict(n_ring=7, n_extra=4, scatter=0.002)),
    ("c19_ring7c", "ring", dict(n_ring=7, n_extra=4, center=(0.085, -0.085))),
    ("c20_ring6tc", "ring", dict(n_ring=6, n_extra=5, scatter=0.002,
                                        center=(-0.08, -0.08))),
]

_MOTIFS = {
    "pile": lambda seed, kw: generate_case(shape_mix="mixed", rng_seed=seed, **kw),
    "ring": lambda seed, kw: ring_case(rng_seed=seed, **kw),
    "wall": lambda seed, kw: wall_case(rng_seed=seed, **kw),
}


def build_corpus(directory=CASES_DIR, seed: int = 0) -> list:
    """Regenerate the bundled cases; each takes the first seed whose scene is not graspable."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for idx, (case_id, motif, kw) in enumerate(CORPUS_RECIPE):
        for attempt in range(1000):
            s = streams.stream_seed(seed, idx, attempt) & 0xFFFFFFFF
            try:
                state = _MOTIFS[motif](s, kw)
            except WorldError:
                continue
            if not graspable(state).graspable:
                break
        else:
            raise WorldError(f"no usable seed for {case_id}")
        path = directory / f"{case_id}.json"
        save_scene(state, path)
        paths.append(path)
    return paths
