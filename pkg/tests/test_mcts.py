import math
import random

import pytest

from clutterplan.actions import GraspGeometry, graspable, sample_pushes
from clutterplan.bench import generate_case
from clutterplan.mcts import (
    NoLegalPush,
    SearchConfig,
    SearchError,
    SearchTree,
    TreeExhausted,
    TreeNode,
    backprop_mean,
    expand,
    rollout,
    run_serial_mcts,
    select_leaf,
    serial_search,
    tree_signature,
    ucb_score,
)
from clutterplan.pushworld import GripperTip, ObjectShape, PhysicsConfig, Pose, WorldState, resolve_push

from conftest import lone_disc, open_ring, ring_scene
from oracles import game_tree, ucb_brute


def node(q=0.0, n=0, depth=0, parent=None, untried=(), graspable=False, key=None):
    t = TreeNode(None, parent, key, depth, list(untried), graspable)
    t.q_sum, t.visits = q, n
    if parent is not None:
        parent.children[key] = t
    return t


def test_ucb_examples():
    p = node(n=8)
    assert ucb_score(p, node(), 0.3) == math.inf
    assert ucb_score(p, node(1.0, 2), 0.3) == pytest.approx(0.5 + 0.3 * math.sqrt(math.log(8)))
    assert ucb_score(p, node(1.0, 2), 0.3) == pytest.approx(0.9326, abs=5e-5)
    assert ucb_score(p, node(0.8, 4), 0.0) == pytest.approx(0.2)


def test_select_fresh_root():
    root = node(untried=["a", "b"])
    assert select_leaf(root, 0.3, 7) is root


def test_select_greedy_child():
    root = node(1.0, 3)
    kids = [node(q, 1, 1, root, untried=["x"], key=k) for k, q in zip("abc", (0, 1, 0))]
    assert select_leaf(root, 0.0, 7) is kids[1]


def _explicit_tree(rng, depth=3, width=3):
    root = node(0, 0)

    def grow(parent, d):
        for k in range(width):
            child = node(0, 0, d, parent, key=(d, k))
            if d < depth:
                grow(child, d + 1)
            else:
                child.untried = ["leaf"]
        total_n = 0
        total_q = 0.0
        for ch in parent.children.values():
            if d == depth:
                ch.visits = rng.randint(1, 9)
                ch.q_sum = rng.random() * ch.visits
            total_n += ch.visits
            total_q += ch.q_sum
        parent.visits = total_n + rng.randint(0, 3)
        parent.q_sum = total_q

    grow(root, 1)
    return root


@pytest.mark.parametrize("seed", range(10))
def test_select_matches_exhaustive_ucb(seed):
    rng = random.Random(seed)
    root = _explicit_tree(rng)
    c = rng.choice([0.0, 0.3, 1.0])
    # expected path: argmax of the brute-force score, first child on ties
    expect = root
    while expect.children and not expect.untried:
        scores = [ucb_brute(ch.q_sum, ch.visits, expect.visits, c) for ch in expect.children.values()]
        expect = list(expect.children.values())[scores.index(max(scores))]
    assert select_leaf(root, c, 7) is expect


def test_select_skips_dead_and_raises_when_all_dead():
    root = node(0, 2)
    a = node(0, 1, 1, root, key="a")
    a.dead = True
    b = node(0, 1, 1, root, untried=["z"], key="b")
    assert select_leaf(root, 0.3, 7) is b
    b.dead = True
    with pytest.raises(TreeExhausted):
        select_leaf(root, 0.3, 7)


def test_select_stops_at_terminal():
    root = node(0, 2)
    g = node(1, 1, 1, root, graspable=True, key="g")
    assert select_leaf(root, 0.3, 7) is g
    deep = node(0, 1)
    leaf = node(0, 1, 1, deep, key="d")
    assert select_leaf(deep, 0.3, 1) is leaf


def _cfg(**kw):
    kw.setdefault("max_iterations", 50)
    return SearchConfig(**kw)


def test_expand_lone_disc():
    # the root is marked non-graspable by hand so it can be expanded
    lone = SearchTree(lone_disc(), _cfg())
    lone.root.graspable = False
    lone.root.untried = sample_pushes(lone_disc())
    child = expand(lone.root, lone.root.untried[0], lone)
    assert child.depth == 1 and child.graspable


def test_expand_rejects_unknown_action():
    tree = SearchTree(ring_scene(6), _cfg())
    with pytest.raises(SearchError):
        expand(tree.root, ("not", "an", "action", 0), tree)


def test_expand_ring_opening_push():
    s = open_ring()
    tree = SearchTree(s, _cfg())
    root = tree.root
    opening = None
    for a in list(root.untried):
        if graspable(resolve_push(s, a)).graspable:
            opening = a
            break
    assert opening is not None
    child = expand(root, opening, tree)
    assert child.graspable == graspable(resolve_push(s, opening)).graspable is True
    assert opening not in root.untried and root.children[opening] is child
    assert child in tree.early.graspable_nodes
    # finding a depth-1 grasp shrinks the depth limits
    assert tree.d_T == 1 and tree.d_s == 0


def test_rollout_rewards():
    tree = SearchTree(ring_scene(6), _cfg(gamma=0.8))
    g = node(depth=2, graspable=True)
    assert rollout(g, tree, 1) == pytest.approx(0.64)
    lone = node(depth=0, graspable=True)
    assert rollout(lone, tree, 1) == 1.0
    blocked = TreeNode(tree.root.state, None, None, tree.max_depth, [])
    assert rollout(blocked, tree, 1) == 0.0


def test_rollout_rewards_are_discount_powers():
    s = blocked_case(10, 2)
    cfg = _cfg()
    tree = SearchTree(s, cfg)
    allowed = {0.0} | {cfg.gamma ** k for k in range(1, cfg.d_T + cfg.d_s + 1)}
    for seed in range(30):
        r = rollout(tree.root, tree, seed)
        assert any(abs(r - a) < 1e-15 for a in allowed)


def test_backprop():
    root = node()
    backprop_mean(root, 1.0)
    assert (root.q_sum, root.visits) == (1.0, 1)
    a = node(parent=root, depth=1, key="a")
    b = node(parent=a, depth=2, key="b")
    c = node(parent=b, depth=3, key="c")
    backprop_mean(c, 0.64)
    assert [(n.q_sum, n.visits) for n in (c, b, a)] == [(0.64, 1)] * 3
    assert root.visits == 2 and root.q_sum == pytest.approx(1.64)
    rng = random.Random(0)
    fresh = node()
    total = 0.0
    for _ in range(100):
        r = rng.random()
        total += r
        backprop_mean(fresh, r)
    assert fresh.visits == 100 and fresh.q_sum == pytest.approx(total)


def test_single_legal_action():
    # a target too wide to grasp with one sampled push
    s = WorldState.from_objects([(ObjectShape.disc(0.05), Pose(0, 0, 0))], 0)
    cfg = _cfg(n_actions_per_object=1, max_iterations=5)
    only = sample_pushes(s, 1)
    assert len(only) == 1
    assert run_serial_mcts(s, cfg) == only[0]


def test_refuses_graspable_root_and_no_push():
    with pytest.raises(SearchError):
        run_serial_mcts(lone_disc(), _cfg())
    # four discs pinning a too-wide target in the corner leave nothing to push
    big = WorldState.from_objects([(ObjectShape.disc(0.05), Pose(0, 0, 0))], 0)
    with pytest.raises(NoLegalPush):
        run_serial_mcts(big, _cfg(tip=GripperTip(radius=0.2)))


# five ringed neighbours, two pushes per object: only one root push leads to a
# grasp within two pushes
def two_push_toy():
    return ring_scene(5, r_ring=0.022, dist=0.038, phase=0.3)


def test_two_push_toy_against_game_tree():
    s = two_push_toy()
    oracle = game_tree(s, 2, GripperTip(), PhysicsConfig(), GraspGeometry(), 0.003, n_per_object=2)
    good = [a for a, v in oracle.items() if v is not None]
    assert len(good) == 1 and len(oracle) > 1
    # the planner gets the oracle's horizon: two pushes, no rollout past the tree
    for seed in range(8):
        cfg = SearchConfig(n_actions_per_object=2, d_T=2, d_s=0, time_budget=1.0, rng_seed=seed)
        assert run_serial_mcts(s, cfg) == good[0]


def test_zero_budget_runs_one_iteration():
    s = blocked_case(9, 1)
    res = serial_search(s, SearchConfig(time_budget=0.0))
    assert res.iterations == 1
    assert res.action in res.tree.root.children


def blocked_case(n, seed):
    """First generated scene from ``seed`` on whose target is not yet graspable."""
    while True:
        s = generate_case(n, "mixed", seed)
        if not graspable(s).graspable:
            return s
        seed += 1000


def _check_tree(tree, cfg):
    for n in tree.root.iter_subtree():
        kids = list(n.children.values())
        own = n.visits - sum(ch.visits for ch in kids)
        assert own >= 0
        assert n.q_sum <= n.visits + 1e-12
        assert set(n.children).isdisjoint(n.untried)
        if n.parent is not None:
            assert n.depth == n.parent.depth + 1
        assert n.depth <= cfg.d_T
        assert n.virtual_visits == 0


@pytest.mark.parametrize("seed", range(6))
def test_tree_consistency_and_determinism(seed):
    s = blocked_case(8 + seed % 4, 100 + seed)
    cfg = SearchConfig(max_iterations=150, rng_seed=seed, time_budget=None)
    a = serial_search(s, cfg)
    b = serial_search(s, cfg)
    assert tree_signature(a.tree.root) == tree_signature(b.tree.root)
    assert a.action == b.action
    _check_tree(a.tree, cfg)
    assert a.tree.root.visits == a.iterations
    # every node sits within the (possibly shrunk) depth limit it was selected under
    graspable_depths = [n.depth for n in a.tree.early.graspable_nodes]
    if graspable_depths:
        assert a.tree.d_T <= min(graspable_depths)


def test_early_stop_subtree_holds_grasp():
    s = blocked_case(10, 5)
    res = serial_search(s, SearchConfig(max_iterations=2000, time_budget=None))
    if res.stop_reason != "early_stop":
        pytest.skip("search ended otherwise")
    sub = res.tree.root.children[res.action]
    assert any(n.graspable and n.depth <= res.tree.early.es_level for n in sub.iter_subtree())


def test_final_rule_flag():
    s = blocked_case(9, 3)
    mean = serial_search(s, SearchConfig(max_iterations=60, time_budget=None, early_stop=False))
    items = list(mean.tree.root.children.items())
    best = max(range(len(items)), key=lambda i: (items[i][1].mean(), items[i][1].visits, -i))
    assert mean.action == items[best][0]
    ucb = serial_search(s, SearchConfig(max_iterations=60, time_budget=None, early_stop=False,
                                        final_rule="ucb"))
    assert ucb.action in ucb.tree.root.children


def test_config_validation():
    for bad in (dict(gamma=1.5), dict(c_explore=-1), dict(d_T=0), dict(final_rule="max"),
                dict(time_budget=None)):
        with pytest.raises(ValueError):
            SearchConfig(**bad)
