"""Parallel MCTS with batched simulation.

One iteration selects up to ``n_envs`` unique (node, action) pairs under
virtual loss, expands them as one batch, runs a batch of rollouts over the
new nodes (several environments per node when there are more environments
than nodes), and backs up each node's best rollout reward once.

Only kernel work runs on the worker pool.  Every tree mutation happens on the
driver thread in batch order, and every rollout draws from a stream keyed by
(iteration, environment, segment), so the result does not depend on the pool
size or on thread scheduling.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, NamedTuple

from clutterplan import _kernels as K
from clutterplan import streams
from clutterplan.mcts import (
    NoLegalPush,
    SearchConfig,
    SearchError,
    SearchResult,
    SearchTree,
    TreeExhausted,
    TreeNode,
    backprop_mean,
    budget_spent,
)
from clutterplan.pushworld import PushAction, WorldState, map_ordered


@dataclass
class ParallelConfig(SearchConfig):
    n_envs: int = 64
    worker_pool_size: int = 1
    leaf_parallel: bool = True

    def __post_init__(self):
        super().__post_init__()
        if self.n_envs < 1 or self.worker_pool_size < 1:
            raise ValueError("n_envs and worker_pool_size must be >= 1")


class SelectionBatch(NamedTuple):
    """Unique (node, action) pairs; ``action`` is None for a terminal node revisit."""

    pairs: list

    def __len__(self):
        return len(self.pairs)


def ucb_virtual(parent: TreeNode, child: TreeNode, c: float) -> float:
    n = child.visits + child.virtual_visits
    if n == 0:
        return math.inf
    return child.q_sum / n + c * math.sqrt(2.0 * math.log(parent.visits + parent.virtual_visits) / n)


def select_batch(root: TreeNode, n_envs: int, c: float, d_T: int) -> SelectionBatch:
    """Pick up to ``n_envs`` unique pairs, steering apart with virtual visits.

    Each descent ends at a node with untried actions (one is popped) or at a
    terminal node, which is revisited at most once per batch.  Virtual visits
    are added along the path and left in place; call :func:`reset_virtual`.
    """
    if root.dead:
        raise TreeExhausted("root is dead")
    pairs = []
    closed = set()
    while len(pairs) < n_envs and root not in closed:
        node = root
        path = [root]
        pair = None
        while True:
            if node.terminal(d_T):
                pair = (node, None)
                closed.add(node)
                break
            if node.untried:
                pair = (node, node.untried.pop(0))
                break
            best = None
            best_score = -math.inf
            for child in node.children.values():
                if child.dead or child.exhausted or child in closed:
                    continue
                s = ucb_virtual(node, child, c)
                if s > best_score:
                    best = child
                    best_score = s
            if best is None:
                if all(ch.dead or ch.exhausted for ch in node.children.values()):
                    node.exhausted = True
                closed.add(node)
                break
            node = best
            path.append(node)
        if pair is None:
            continue
        pairs.append(pair)
        for n in path:
            n.virtual_visits += 1
    if not pairs:
        raise TreeExhausted("no selectable pair left")
    return SelectionBatch(pairs)


def reset_virtual(root: TreeNode):
    for node in root.iter_subtree():
        node.virtual_visits = 0


def batch_expand(batch: SelectionBatch, tree: SearchTree, workers: int = 1,
                 executor: ThreadPoolExecutor | None = None) -> list:
    """Expand every pair of the batch; revisit pairs return their node as is."""
    todo = [(node.state, action) for node, action in batch.pairs if action is not None]
    model = tree.model
    results = map_ordered(lambda sa: model.evaluate(*sa), todo, workers, executor)
    out = []
    it = iter(results)
    for node, action in batch.pairs:
        if action is None:
            out.append(node)
            continue
        tree.popped(node)
        res = next(it)
        if isinstance(res, Exception):
            out.append(tree.attach(node, action, node.state, False, [], failed=True))
        else:
            out.append(tree.attach(node, action, *res))
    return out


class Segment(NamedTuple):
    node: int
    env: int
    index: int
    start: int
    cap: int


def leaf_parallel_rollouts(horizons: list, n_envs: int, run_segments: Callable,
                           reassign: bool = True) -> list:
    """Schedule rollouts of several nodes over ``n_envs`` lock-stepped environments.

    ``horizons[i]`` is the push budget of node i.  Environments are split over
    the nodes as evenly as possible, earlier nodes taking the remainder.
    Time advances one push per step for every environment.  When a rollout
    reaches a graspable state early, its environment is handed to the node
    with the most remaining planned pushes (lowest index on ties) and starts
    a fresh rollout there, capped so it ends by the longest horizon.

    ``run_segments(list[Segment])`` returns one ``(pushes, outcome, reward)``
    per segment.  Returns every node's list of segment rewards.
    """
    m = len(horizons)
    if m == 0:
        return []
    if n_envs < m:
        raise ValueError("need at least one environment per node")
    end_time = max(horizons)
    segments = []
    env = 0
    for i in range(m):
        for _ in range(n_envs // m + (1 if i < n_envs % m else 0)):
            segments.append(Segment(i, env, 0, 0, horizons[i]))
            env += 1
    rewards = [[] for _ in range(m)]
    # per env: (segment, actual end, outcome)
    current = {}
    results = run_segments(segments)
    for seg, (pushes, outcome, reward) in zip(segments, results):
        rewards[seg.node].append(reward)
        current[seg.env] = (seg, seg.start + pushes, outcome)
    if not reassign:
        return rewards
    for t in range(end_time):
        fresh = []
        for e in sorted(current):
            seg, end, outcome = current[e]
            if end != t or outcome != K.ROLL_GRASPED:
                continue
            work = [0] * m
            for seg2, end2, _ in current.values():
                if end2 > t:
                    work[seg2.node] += seg2.start + seg2.cap - t
            target = max(range(m), key=lambda i: (work[i], -i))
            if work[target] <= 0:
                continue
            cap = min(horizons[target], end_time - t)
            if cap <= 0:
                continue
            new = Segment(target, e, seg.index + 1, t, cap)
            # counts as running from t until its outcome is known
            current[e] = (new, end_time + 1, -1)
            fresh.append(new)
        if fresh:
            for seg, (pushes, outcome, reward) in zip(fresh, run_segments(fresh)):
                rewards[seg.node].append(reward)
                current[seg.env] = (seg, seg.start + pushes, outcome)
    return rewards


def batch_simulate(new_nodes: list, tree: SearchTree, iteration: int, n_envs: int,
                   leaf_parallel: bool = True, workers: int = 1,
                   executor: ThreadPoolExecutor | None = None) -> list:
    """Roll out every new node and return each node's maximum reward."""
    if not new_nodes:
        raise ValueError("new_nodes is empty")
    model = tree.model
    max_depth = tree.max_depth
    seed = tree.cfg.rng_seed
    horizons = []
    for node in new_nodes:
        if node.graspable or node.dead:
            horizons.append(0)
        else:
            horizons.append(max(max_depth - node.depth, 0))

    def run_one(seg: Segment):
        node = new_nodes[seg.node]
        if node.graspable:
            return 0, K.ROLL_GRASPED, tree.cfg.gamma ** node.depth
        if node.dead:
            return 0, K.ROLL_DEAD, 0.0
        key = streams.stream_seed(seed, streams.ROLLOUT, iteration, seg.env, seg.index)
        pushes, outcome = model.rollout(node.state.poses, node.depth, max_depth, seg.cap, key)
        return pushes, outcome, tree.reward(node.depth, pushes, outcome)

    def run_segments(segs):
        out = map_ordered(run_one, segs, workers, executor)
        for r in out:
            if isinstance(r, Exception):
                raise r
        return out

    envs = n_envs if leaf_parallel else len(new_nodes)
    per_node = leaf_parallel_rollouts(horizons, max(envs, len(new_nodes)), run_segments,
                                      reassign=leaf_parallel)
    return [max(r) for r in per_node]


def backprop_max(new_nodes: list, rewards: list):
    """Back up each node's best rollout reward once."""
    if len(new_nodes) != len(rewards):
        raise ValueError("new_nodes and rewards differ in length")
    for node, r in zip(new_nodes, rewards):
        backprop_mean(node, r)


def pmbs_search(state: WorldState, cfg: ParallelConfig) -> SearchResult:
    started = time.perf_counter()
    tree = SearchTree(state, cfg)
    root = tree.root
    if root.graspable:
        raise SearchError("the target is already graspable at the root")
    if root.dead:
        raise NoLegalPush("no legal push at the root")
    workers = cfg.worker_pool_size
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    it = 0
    reason = "budget"
    try:
        while True:
            if it > 0:
                if budget_spent(cfg, it, tree.expansions, started):
                    break
                if cfg.early_stop and tree.early_stop_reached():
                    reason = "early_stop"
                    break
                if tree.fully_explored():
                    reason = "explored"
                    break
            try:
                batch = select_batch(root, cfg.n_envs, cfg.c_explore, tree.d_T)
            except TreeExhausted:
                reason = "exhausted"
                break
            reset_virtual(root)
            new_nodes = batch_expand(batch, tree, workers, executor)
            tree.update_es_level()
            rewards = batch_simulate(new_nodes, tree, it, cfg.n_envs, cfg.leaf_parallel,
                                     workers, executor)
            backprop_max(new_nodes, rewards)
            it += 1
    finally:
        if executor is not None:
            executor.shutdown()
    return SearchResult(tree.best_action(), tree, it, time.perf_counter() - started, reason)


def run_pmbs(state: WorldState, cfg: ParallelConfig) -> PushAction:
    return pmbs_search(state, cfg).action
