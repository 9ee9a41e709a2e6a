"""Serial Monte Carlo tree search over pushes.

Rewards are discounted by push count: reaching a graspable state after ``k``
pushes from the root is worth ``gamma ** k``.  The tree is depth limited
(``d_T``), rollouts may continue ``d_s`` pushes past it, and both limits shrink
to the depth of the shallowest graspable node once one is found.

:class:`SearchTree` holds the bookkeeping shared with the batched planner in
:mod:`clutterplan.pmbs`: depth limits, the early-stop level and the set of
nodes that still have actions to expand.
"""

from __future__ import annotations

import math
import random
import time
from collections import defaultdict
from dataclasses import dataclass, field, fields, replace

import numpy as np

from clutterplan import _kernels as K
from clutterplan import streams
from clutterplan.actions import (
    DEFAULT_MARGIN_THRESHOLD,
    DEFAULT_PUSHES_PER_OBJECT,
    GraspGeometry,
)
from clutterplan.pushworld import (
    GripperTip,
    PhysicsConfig,
    PushAction,
    WorldState,
    physics_params,
)


class SearchError(RuntimeError):
    pass


class NoLegalPush(SearchError):
    """The root state admits no push."""


class TreeExhausted(SearchError):
    """Every path from the root ends in a dead node."""


@dataclass
class SearchConfig:
    gamma: float = 0.8
    c_explore: float = 0.3
    d_T: int = 7
    d_s: int = 3
    time_budget: float | None = 60.0
    max_iterations: int | None = None
    max_expansions: int | None = None
    n_actions_per_object: int = DEFAULT_PUSHES_PER_OBJECT
    margin_threshold: float = DEFAULT_MARGIN_THRESHOLD
    rng_seed: int = 0
    # "mean" ranks root children by average reward, "ucb" by the selection score
    final_rule: str = "mean"
    early_stop: bool = True
    tip: GripperTip = field(default_factory=GripperTip)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    grasp: GraspGeometry = field(default_factory=GraspGeometry)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.c_explore < 0:
            raise ValueError("c_explore must be >= 0")
        if self.d_T < 1 or self.d_s < 0:
            raise ValueError("need d_T >= 1 and d_s >= 0")
        if self.n_actions_per_object < 1:
            raise ValueError("n_actions_per_object must be >= 1")
        if self.final_rule not in ("mean", "ucb"):
            raise ValueError("final_rule must be 'mean' or 'ucb'")
        if self.time_budget is None and self.max_iterations is None and self.max_expansions is None:
            raise ValueError("set at least one of time_budget, max_iterations, max_expansions")
        self.rng_seed = int(self.rng_seed) & ((1 << 64) - 1)

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.__dict__.copy() if hasattr(v, "__dataclass_fields__") else v
        return out


class TreeNode:
    __slots__ = ("state", "parent", "action", "depth", "q_sum", "visits", "virtual_visits",
                 "untried", "children", "graspable", "dead", "exhausted")

    def __init__(self, state=None, parent=None, action=None, depth=0, untried=None,
                 graspable=False, dead=False):
        self.state = state
        self.parent = parent
        self.action = action
        self.depth = depth
        self.q_sum = 0.0
        self.visits = 0
        self.virtual_visits = 0
        self.untried = list(untried or [])
        self.children = {}
        self.graspable = graspable
        self.dead = dead
        # set once every child is dead or exhausted and nothing is left to try
        self.exhausted = False

    def expandable(self, d_T: int) -> bool:
        return bool(self.untried) and self.depth < d_T and not self.graspable and not self.dead

    def terminal(self, d_T: int) -> bool:
        return self.graspable or self.depth >= d_T

    def mean(self) -> float:
        return self.q_sum / self.visits if self.visits else 0.0

    def iter_subtree(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(list(node.children.values())))

    def __repr__(self):
        return (f"TreeNode(depth={self.depth}, Q={self.q_sum:.4g}, N={self.visits}, "
                f"N_hat={self.virtual_visits}, children={len(self.children)}, "
                f"untried={len(self.untried)}, graspable={self.graspable}, dead={self.dead})")


def ucb_score(parent: TreeNode, child: TreeNode, c: float) -> float:
    if child.visits == 0:
        return math.inf
    n = child.visits
    return child.q_sum / n + c * math.sqrt(2.0 * math.log(parent.visits) / n)


def tree_signature(root: TreeNode) -> list:
    """(action path, q_sum, visits) of every node, depth first in insertion order."""
    out = []
    stack = [(root, ())]
    while stack:
        node, path = stack.pop()
        out.append((path, node.q_sum, node.visits))
        for action, child in reversed(list(node.children.items())):
            stack.append((child, path + (tuple(action),)))
    return out


class SceneModel:
    """Kernel front end bound to one scene and one configuration."""

    def __init__(self, state: WorldState, cfg: SearchConfig):
        self.layout = state.layout
        self.arrays = state.layout.arrays
        self.target = state.target_index
        self.params = physics_params(state.workspace, cfg.tip, cfg.physics, cfg.grasp,
                                     cfg.margin_threshold)
        self.offsets = state.layout.offsets(cfg.n_actions_per_object,
                                            cfg.tip.radius + cfg.tip.clearance)
        self.seed = cfg.rng_seed
        self._buf_rows = state.n_objects * cfg.n_actions_per_object

    def graspable(self, poses) -> bool:
        return bool(K.is_graspable(poses, *self.arrays, self.params, self.target))

    def candidates(self, poses) -> list:
        buf = np.empty((self._buf_rows, 4))
        count = K.sample_pushes(poses, *self.arrays, self.params, self.offsets, buf)
        return [PushAction(*row) for row in buf[:count].tolist()]

    def step(self, poses, action):
        out, _ = K.resolve_push(poses, *self.arrays, self.params, *action)
        return out

    def action_order(self, state: WorldState, actions: list) -> list:
        """Deterministic per-state permutation of the untried actions."""
        key = streams.stream_seed(self.seed, streams.ACTION_ORDER, int(state.digest()[:16], 16))
        random.Random(key).shuffle(actions)
        return actions

    def evaluate(self, parent_state: WorldState, action: PushAction):
        """Resolve ``action`` and classify the result.

        Returns ``(state, graspable, actions)``; ``actions`` is empty for a
        graspable state.
        """
        state = parent_state.with_poses(self.step(parent_state.poses, action))
        if self.graspable(state.poses):
            return state, True, []
        return state, False, self.action_order(state, self.candidates(state.poses))

    def rollout(self, poses, depth: int, max_depth: int, max_pushes: int, seed: int):
        pushes, outcome = K.rollout(poses, *self.arrays, self.params, self.offsets, self.target,
                                    depth, max_depth, max_pushes, np.uint64(seed))
        return int(pushes), int(outcome)


@dataclass
class EarlyStopState:
    es_level: int = 1
    graspable_nodes: list = field(default_factory=list)


class SearchTree:
    """A search tree plus the limits and stopping state that evolve with it."""

    def __init__(self, state: WorldState, cfg: SearchConfig, model: SceneModel | None = None):
        self.cfg = cfg
        self.model = model or SceneModel(state, cfg)
        self.d_T = cfg.d_T
        self.d_s = cfg.d_s
        self.early = EarlyStopState()
        self.levels = defaultdict(list)
        self.open_nodes = set()
        self.expansions = 0
        grasp = self.model.graspable(state.poses)
        actions = [] if grasp else self.model.action_order(state, self.model.candidates(state.poses))
        self.root = TreeNode(state, depth=0, untried=actions, graspable=grasp,
                             dead=not grasp and not actions)
        self._register(self.root)

    @property
    def max_depth(self) -> int:
        return self.d_T + self.d_s

    def _register(self, node: TreeNode):
        self.levels[node.depth].append(node)
        if node.expandable(self.d_T):
            self.open_nodes.add(node)

    def popped(self, node: TreeNode):
        if not node.expandable(self.d_T):
            self.open_nodes.discard(node)

    def attach(self, parent: TreeNode, action: PushAction, state: WorldState,
               graspable: bool, actions: list, failed: bool = False) -> TreeNode:
        depth = parent.depth + 1
        if depth >= self.d_T:
            untried = []
        else:
            untried = actions
        child = TreeNode(state, parent, action, depth, untried, graspable,
                         dead=failed or (not graspable and not actions))
        parent.children[action] = child
        self.expansions += 1
        self._register(child)
        if graspable:
            self.early.graspable_nodes.append(child)
            if depth < self.d_T:
                self.shrink(depth)
        return child

    def shrink(self, depth: int):
        self.d_T = depth
        self.d_s = 0
        self.open_nodes = {n for n in self.open_nodes if n.expandable(self.d_T)}

    def closed(self, node: TreeNode) -> bool:
        return not node.untried or node.terminal(self.d_T) or node.dead

    def update_es_level(self):
        level = self.early.es_level - 1
        if all(self.closed(n) for n in self.levels.get(level, ())):
            self.early.es_level += 1

    def early_stop_reached(self) -> bool:
        lvl = self.early.es_level
        return any(n.depth <= lvl for n in self.early.graspable_nodes)

    def fully_explored(self) -> bool:
        return not self.open_nodes

    def reward(self, depth: int, pushes: int, outcome: int) -> float:
        if outcome != K.ROLL_GRASPED:
            return 0.0
        return self.cfg.gamma ** (depth + pushes)

    def best_action(self) -> PushAction:
        root = self.root
        if not root.children:
            raise NoLegalPush("root was never expanded")
        items = list(root.children.items())
        if self.cfg.final_rule == "ucb":
            scores = [ucb_score(root, ch, self.cfg.c_explore) for _, ch in items]
            best = max(range(len(items)), key=lambda i: (scores[i], -i))
        else:
            best = max(range(len(items)),
                       key=lambda i: (items[i][1].mean(), items[i][1].visits, -i))
        return items[best][0]


def select_leaf(root: TreeNode, c: float, d_T: int) -> TreeNode:
    """Descend by UCB to the node the next iteration works on.

    Stops at the first node that still has untried actions, or at a terminal
    node (graspable, or at the depth limit).  Dead children are skipped and a
    node whose children are all dead is marked exhausted.
    """
    if root.dead:
        raise TreeExhausted("root is dead")
    while True:
        node = root
        while True:
            if node.terminal(d_T) or node.untried:
                return node
            best = None
            best_score = -math.inf
            for child in node.children.values():
                if child.dead or child.exhausted:
                    continue
                s = ucb_score(node, child, c)
                if s > best_score:
                    best = child
                    best_score = s
            if best is None:
                node.exhausted = True
                if node is root:
                    raise TreeExhausted("every path from the root is dead")
                break
            node = best


def expand(node: TreeNode, action: PushAction, tree: SearchTree) -> TreeNode:
    if action not in node.untried:
        raise SearchError("action is not an untried action of this node")
    if not node.expandable(tree.d_T):
        raise SearchError("node cannot be expanded")
    node.untried.remove(action)
    tree.popped(node)
    state, grasp, actions = tree.model.evaluate(node.state, action)
    return tree.attach(node, action, state, grasp, actions)


def rollout(node: TreeNode, tree: SearchTree, seed: int) -> float:
    """Random-push playout from ``node``; see :meth:`SearchTree.reward`."""
    if node.graspable:
        return tree.cfg.gamma ** node.depth
    if node.dead:
        return 0.0
    horizon = tree.max_depth - node.depth
    pushes, outcome = tree.model.rollout(node.state.poses, node.depth, tree.max_depth,
                                         max(horizon, 0), seed)
    return tree.reward(node.depth, pushes, outcome)


def backprop_mean(leaf: TreeNode, reward: float):
    node = leaf
    while node is not None:
        node.q_sum += reward
        node.visits += 1
        node = node.parent


@dataclass
class SearchResult:
    action: PushAction
    tree: SearchTree
    iterations: int
    elapsed: float
    stop_reason: str


def budget_spent(cfg: SearchConfig, iterations: int, expansions: int, started: float) -> bool:
    if cfg.max_iterations is not None and iterations >= cfg.max_iterations:
        return True
    if cfg.max_expansions is not None and expansions >= cfg.max_expansions:
        return True
    if cfg.time_budget is not None and time.perf_counter() - started >= cfg.time_budget:
        return True
    return False


def serial_search(state: WorldState, cfg: SearchConfig) -> SearchResult:
    started = time.perf_counter()
    tree = SearchTree(state, cfg)
    root = tree.root
    if root.graspable:
        raise SearchError("the target is already graspable at the root")
    if root.dead:
        raise NoLegalPush("no legal push at the root")
    it = 0
    reason = "budget"
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
            leaf = select_leaf(root, cfg.c_explore, tree.d_T)
        except TreeExhausted:
            reason = "exhausted"
            break
        if leaf.expandable(tree.d_T):
            node = expand(leaf, leaf.untried[0], tree)
        else:
            node = leaf
        tree.update_es_level()
        reward = rollout(node, tree, streams.stream_seed(cfg.rng_seed, streams.ROLLOUT, it, 0, 0))
        backprop_mean(node, reward)
        it += 1
    return SearchResult(tree.best_action(), tree, it, time.perf_counter() - started, reason)


def run_serial_mcts(state: WorldState, cfg: SearchConfig) -> PushAction:
    return serial_search(state, cfg).action
