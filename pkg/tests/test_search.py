import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llm_mapf.grid import Coord, GridMap, Instance
from llm_mapf.search import (
    UNREACHABLE,
    PlanningError,
    bfs_distances,
    format_plan,
    joint_optimal,
    makespan_lower_bound,
    parse_plan,
    prioritized_plan,
    prioritized_plan_with_restarts,
)
from llm_mapf.validator import check_plan


def C(*pairs):
    return tuple(Coord(*p) for p in pairs)


def relax_distances(m, source):
    """Bellman-Ford style relaxation, independent of the BFS queue."""
    free = m.free_cells()
    d = {c: float("inf") for c in free}
    d[source] = 0
    changed = True
    while changed:
        changed = False
        for c in free:
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nb = Coord(c.x + dx, c.y + dy)
                if nb in d and d[nb] + 1 < d[c]:
                    d[c] = d[nb] + 1
                    changed = True
    return d


def test_bfs_empty_manhattan():
    assert bfs_distances(GridMap.empty(8, 8), Coord(0, 0))[Coord(7, 7)] == 14


def test_bfs_example_map(example_map):
    oracle = relax_distances(example_map, Coord(0, 2))
    assert oracle[Coord(3, 1)] == 4
    assert bfs_distances(example_map, Coord(0, 2))[Coord(3, 1)] == 4


def test_bfs_unreachable():
    m = GridMap(3, 1, frozenset({Coord(1, 0)}))
    df = bfs_distances(m, Coord(0, 0))
    assert df[Coord(2, 0)] == UNREACHABLE
    assert not df.reachable(Coord(2, 0))


def test_bfs_blocked_source(example_map):
    with pytest.raises(ValueError):
        bfs_distances(example_map, Coord(3, 2))


@st.composite
def maps_with_source(draw):
    w, h = draw(st.integers(1, 7)), draw(st.integers(1, 7))
    cells = [Coord(x, y) for x in range(w) for y in range(h)]
    obstacles = draw(st.sets(st.sampled_from(cells), max_size=len(cells) - 1))
    m = GridMap(w, h, frozenset(obstacles))
    return m, draw(st.sampled_from(m.free_cells()))


@given(maps_with_source())
def test_bfs_matches_relaxation(ms):
    m, src = ms
    df = bfs_distances(m, src)
    oracle = relax_distances(m, src)
    for c, d in oracle.items():
        assert df[c] == (UNREACHABLE if d == float("inf") else d)
    for c in m.free_cells():
        for dx, dy in ((1, 0), (0, 1)):
            nb = Coord(c.x + dx, c.y + dy)
            if nb in oracle and df.reachable(c) and df.reachable(nb):
                assert abs(df[c] - df[nb]) <= 1


def test_lower_bound(symmetry, example_map):
    assert makespan_lower_bound(symmetry) == 4
    assert makespan_lower_bound(Instance(example_map, C((0, 0)), C((0, 0)))) == 0
    m = GridMap.empty(10, 2)
    assert makespan_lower_bound(Instance(m, C((0, 0), (0, 1)), C((3, 0), (7, 1)))) == 7


def test_lower_bound_unreachable():
    m = GridMap(3, 1, frozenset({Coord(1, 0)}))
    with pytest.raises(PlanningError):
        makespan_lower_bound(Instance(m, C((0, 0)), C((2, 0))))


def test_joint_optimal_symmetry(symmetry, example_map):
    assert joint_optimal(symmetry) == 5
    assert joint_optimal(Instance(example_map, C((0, 2)), C((3, 1)))) == 4
    assert joint_optimal(symmetry.with_starts(symmetry.goals)) == 0


def test_joint_optimal_size_guard():
    m = GridMap.empty(9, 8)
    with pytest.raises(ValueError):
        joint_optimal(Instance(m, C((0, 0)), C((1, 0))))
    with pytest.raises(ValueError):
        joint_optimal(Instance(GridMap.empty(4, 4), C((0, 0), (1, 0), (2, 0), (3, 0)), C((0, 1), (1, 1), (2, 1), (3, 1))))


def test_joint_optimal_unreachable():
    m = GridMap(3, 1, frozenset({Coord(1, 0)}))
    with pytest.raises(PlanningError):
        joint_optimal(Instance(m, C((0, 0)), C((2, 0))))


def test_prioritized_symmetry(symmetry):
    plan = prioritized_plan(symmetry, [1, 2])
    assert plan.makespan == 5
    assert check_plan(symmetry, plan.steps).solved


def test_prioritized_single_agent(example_map):
    inst = Instance(example_map, C((0, 2)), C((3, 1)))
    assert prioritized_plan(inst).makespan == 4


def test_prioritized_disjoint_corridors():
    m = GridMap.empty(6, 2)
    inst = Instance(m, C((0, 0), (5, 1)), C((5, 0), (0, 1)))
    plan = prioritized_plan(inst)
    assert plan.makespan == makespan_lower_bound(inst) == 5 == joint_optimal(inst)


def test_prioritized_rejects_bad_order(symmetry):
    with pytest.raises(ValueError):
        prioritized_plan(symmetry, [1, 1])


def test_prioritized_failure_is_reported():
    # corridor: agent 1 is already parked on the only cell agent 2 must pass
    m = GridMap.empty(3, 1)
    inst = Instance(m, C((1, 0), (0, 0)), C((1, 0), (2, 0)))
    with pytest.raises(PlanningError):
        prioritized_plan(inst, [1, 2])
    plan = prioritized_plan_with_restarts(inst)
    assert check_plan(inst, plan.steps).solved


def random_instance(rng, side=4, n=2):
    w, h = rng.randint(2, side), rng.randint(2, side)
    cells = [Coord(x, y) for x in range(w) for y in range(h)]
    obstacles = {c for c in cells if rng.random() < 0.2}
    free = [c for c in cells if c not in obstacles]
    if len(free) < 2 * n:
        return None
    m = GridMap(w, h, frozenset(obstacles))
    starts = rng.sample(free, n)
    goals = rng.sample(free, n)
    inst = Instance(m, tuple(starts), tuple(goals))
    try:
        makespan_lower_bound(inst)
    except PlanningError:
        return None
    return inst


@settings(max_examples=60, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(1, 3))
def test_search_orderings(rng, n):
    inst = random_instance(rng, n=n)
    if inst is None:
        return
    lb = makespan_lower_bound(inst)
    try:
        opt = joint_optimal(inst)
    except PlanningError:
        return
    assert opt >= lb
    if n == 1:
        assert opt == lb
    for order in itertools.permutations(range(1, n + 1)):
        try:
            plan = prioritized_plan(inst, order)
        except PlanningError:
            continue
        assert check_plan(inst, plan.steps).solved
        assert plan.makespan >= opt >= lb


def test_plan_text_round_trip(symmetry):
    steps = prioritized_plan(symmetry).steps
    text = format_plan(steps)
    assert text.splitlines()[0] == "0: (0,2) (1,3)"
    assert parse_plan(text) == list(steps)


@pytest.mark.parametrize("text", ["", "0: (0,0)\n2: (0,1)\n", "0: (0,0)\n1: (0,1) (1,1)\n", "x: (0,0)\n", "0:\n"])
def test_parse_plan_errors(text):
    with pytest.raises(ValueError):
        parse_plan(text)


def test_prioritized_on_random_larger_maps():
    rng = random.Random(7)
    for _ in range(20):
        inst = random_instance(rng, side=10, n=5)
        if inst is None:
            continue
        try:
            plan = prioritized_plan_with_restarts(inst, attempts=10)
        except PlanningError:
            continue
        assert check_plan(inst, plan.steps).solved
        assert plan.makespan >= makespan_lower_bound(inst)
