"""Command line entry point: ``bench run | gen | replay``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from clutterplan import bench
from clutterplan.pmbs import ParallelConfig
from clutterplan.pushworld import save_scene

# config-file keys mirror the long flag names of `bench run`
RUN_KEYS = ("cases", "planner", "envs", "workers", "budget", "iters", "trials", "seed", "c",
            "gamma", "dt", "ds", "cap", "out", "log_dir", "no_leaf_parallel", "no_timing")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bench", description="Push-to-grasp planning benchmark")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run planners over a directory of cases")
    run.add_argument("--config", help="JSON file whose keys mirror the flags below")
    run.add_argument("--cases", help="directory of case files (default: bundled corpus)")
    run.add_argument("--planner", choices=["serial", "pmbs"])
    run.add_argument("--envs", type=int, help="parallel environments per iteration")
    run.add_argument("--workers", type=int, help="worker threads")
    budget = run.add_mutually_exclusive_group()
    budget.add_argument("--budget", type=float, help="seconds per planning step")
    budget.add_argument("--iters", type=int, help="iterations per planning step")
    run.add_argument("--trials", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--c", type=float, help="exploration constant")
    run.add_argument("--gamma", type=float)
    run.add_argument("--dt", type=int, help="maximum tree depth")
    run.add_argument("--ds", type=int, help="maximum rollout depth")
    run.add_argument("--cap", type=int, help="action cap per episode")
    run.add_argument("--out", help="results CSV (default: stdout)")
    run.add_argument("--log-dir", dest="log_dir", help="write one JSONL step log per episode")
    run.add_argument("--no-leaf-parallel", dest="no_leaf_parallel", action="store_true",
                     default=None)
    run.add_argument("--no-timing", dest="no_timing", action="store_true", default=None,
                     help="write NA for planning time so output is byte-reproducible")

    gen = sub.add_parser("gen", help="generate a random cluttered case")
    gen.add_argument("--n-objects", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--shapes", default="mixed", choices=["discs", "polygons", "mixed"])
    gen.add_argument("--out", required=True)

    rep = sub.add_parser("replay", help="re-execute an episode log and check its digests")
    rep.add_argument("--log", required=True)

    sub.add_parser("corpus", help="regenerate the bundled cases").add_argument("--out")
    return ap


def _run_settings(args) -> dict:
    settings = {}
    if args.config:
        settings = json.loads(Path(args.config).read_text())
        unknown = set(settings) - set(RUN_KEYS)
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        if "budget" in settings and "iters" in settings:
            raise SystemExit("config sets both budget and iters")
    for key in RUN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            if key in ("budget", "iters"):
                settings.pop("iters" if key == "budget" else "budget", None)
            settings[key] = value
    return settings


def _config(settings: dict) -> bench.BenchmarkConfig:
    search = ParallelConfig(
        time_budget=float(settings.get("budget", 8.0)),
        max_iterations=settings.get("iters"),
        c_explore=float(settings.get("c", 0.3)),
        gamma=float(settings.get("gamma", 0.8)),
        d_T=int(settings.get("dt", 7)),
        d_s=int(settings.get("ds", 3)),
        n_envs=int(settings.get("envs", 64)),
        worker_pool_size=int(settings.get("workers", 1)),
        leaf_parallel=not settings.get("no_leaf_parallel", False),
    )
    return bench.BenchmarkConfig(
        case_paths=bench.case_paths(settings.get("cases")),
        planner=settings.get("planner", "pmbs"),
        search=search,
        trials=int(settings.get("trials", 5)),
        action_cap=int(settings.get("cap", 16)),
        seed_base=int(settings.get("seed", 0)),
        output=settings.get("out"),
        log_dir=settings.get("log_dir"),
        record_timing=not settings.get("no_timing", False),
    )


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.cmd == "run":
        cfg = _config(_run_settings(args))
        if not cfg.case_paths:
            print("no case files found", file=sys.stderr)
            return 2
        to_stdout = cfg.output is None
        if to_stdout:
            cfg.output = "/dev/stdout"
        bench.run_benchmark(cfg)
        if not to_stdout:
            _, summary = bench.read_results(cfg.output)
            for k, v in summary.items():
                print(f"{k}: {v:.4f}")
        return 0
    if args.cmd == "gen":
        state = bench.generate_case(args.n_objects, args.shapes, args.seed)
        save_scene(state, args.out)
        print(f"wrote {args.out} ({state.n_objects} objects, target {state.target_index})")
        return 0
    if args.cmd == "replay":
        report = bench.replay(args.log)
        print(json.dumps(report))
        return 0 if report["ok"] else 1
    if args.cmd == "corpus":
        for p in bench.build_corpus(args.out or bench.CASES_DIR):
            print(p)
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
