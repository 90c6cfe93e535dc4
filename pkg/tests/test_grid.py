import pytest
from hypothesis import given
from hypothesis import strategies as st

from llm_mapf.grid import ACTION_ORDER, Action, Coord, GridMap, Instance, apply_action, is_free, valid_actions


@pytest.mark.parametrize(
    "c, a, expected",
    [
        ((0, 2), Action.RIGHT, (1, 2)),
        ((1, 3), Action.STAY, (1, 3)),
        ((0, 0), Action.DOWN, (0, -1)),
        ((2, 2), Action.LEFT, (1, 2)),
        ((2, 2), Action.UP, (2, 3)),
    ],
)
def test_apply_action(c, a, expected):
    assert apply_action(Coord(*c), a) == expected


def test_is_free(example_map):
    assert is_free(example_map, Coord(1, 2))
    assert not is_free(example_map, Coord(3, 2))
    assert not is_free(example_map, Coord(4, 0))
    assert not is_free(example_map, Coord(0, -1))


def test_valid_actions_example_map(example_map):
    assert valid_actions(example_map, Coord(0, 2)) == [
        (Action.STAY, (0, 2)),
        (Action.RIGHT, (1, 2)),
        (Action.UP, (0, 3)),
        (Action.DOWN, (0, 1)),
    ]
    assert valid_actions(example_map, Coord(1, 3)) == [
        (Action.STAY, (1, 3)),
        (Action.LEFT, (0, 3)),
        (Action.RIGHT, (2, 3)),
        (Action.DOWN, (1, 2)),
    ]


def test_valid_actions_single_cell():
    assert valid_actions(GridMap.empty(1, 1), Coord(0, 0)) == [(Action.STAY, (0, 0))]


def test_valid_actions_rejects_blocked_cell(example_map):
    with pytest.raises(ValueError):
        valid_actions(example_map, Coord(3, 2))


def test_action_order_is_frozen():
    assert [a.value for a in ACTION_ORDER] == ["stay", "left", "right", "up", "down"]


def test_map_rejects_out_of_bounds_obstacle():
    with pytest.raises(ValueError):
        GridMap(2, 2, frozenset({Coord(2, 0)}))


@pytest.mark.parametrize(
    "starts, goals",
    [
        ([], []),
        ([(0, 0)], [(1, 1), (0, 1)]),
        ([(0, 0), (0, 0)], [(1, 1), (0, 1)]),
        ([(0, 0), (1, 0)], [(1, 1), (1, 1)]),
        ([(1, 0)], [(0, 0)]),  # (1,0) is an obstacle
    ],
)
def test_instance_invariants(example_map, starts, goals):
    with pytest.raises(ValueError):
        Instance(example_map, tuple(map(Coord._make, starts)), tuple(map(Coord._make, goals)))


@st.composite
def maps_and_cells(draw):
    w = draw(st.integers(1, 8))
    h = draw(st.integers(1, 8))
    cells = [Coord(x, y) for x in range(w) for y in range(h)]
    obstacles = draw(st.sets(st.sampled_from(cells), max_size=len(cells) - 1))
    m = GridMap(w, h, frozenset(obstacles))
    c = draw(st.sampled_from([c for c in cells if c not in obstacles]))
    return m, c


@given(maps_and_cells())
def test_valid_actions_properties(mc):
    m, c = mc
    acts = valid_actions(m, c)
    assert acts[0] == (Action.STAY, c)
    order = [ACTION_ORDER.index(a) for a, _ in acts]
    assert order == sorted(order)
    for a, target in acts:
        assert is_free(m, target)
        assert target == apply_action(c, a)


@given(st.integers(-50, 50), st.integers(-50, 50))
def test_opposite_actions_invert(x, y):
    c = Coord(x, y)
    assert apply_action(apply_action(c, Action.LEFT), Action.RIGHT) == c
    assert apply_action(apply_action(c, Action.UP), Action.DOWN) == c
