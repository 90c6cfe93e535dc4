"""Grid world model: coordinates, actions, maps and MAPF instances.

Coordinates are ``(x, y)`` with the origin in the bottom-left corner, x
growing rightward and y growing upward. File formats that count rows from
the top are converted in :mod:`llm_mapf.bench_io` and nowhere else.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence


class Coord(NamedTuple):
    x: int
    y: int

    def __str__(self) -> str:
        return f"({self.x},{self.y})"


class Action(Enum):
    STAY = "stay"
    LEFT = "left"
    RIGHT = "right"
    UP = "up"
    DOWN = "down"


# Frozen order; prompt text depends on it.
ACTION_ORDER: tuple[Action, ...] = (
    Action.STAY,
    Action.LEFT,
    Action.RIGHT,
    Action.UP,
    Action.DOWN,
)

_DELTAS = {
    Action.STAY: (0, 0),
    Action.LEFT: (-1, 0),
    Action.RIGHT: (1, 0),
    Action.UP: (0, 1),
    Action.DOWN: (0, -1),
}

JointConfig = tuple[Coord, ...]


def apply_action(c: Coord, a: Action) -> Coord:
    """Move one cell in direction ``a``. No bounds check."""
    dx, dy = _DELTAS[a]
    return Coord(c.x + dx, c.y + dy)


def neighbors4(c: Coord) -> tuple[Coord, ...]:
    return tuple(apply_action(c, a) for a in ACTION_ORDER[1:])


def is_adjacent_or_same(a: Coord, b: Coord) -> bool:
    return abs(a.x - b.x) + abs(a.y - b.y) <= 1


@dataclass(frozen=True)
class GridMap:
    width: int
    height: int
    obstacles: frozenset[Coord] = field(default_factory=frozenset)
    name: str = ""

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"map must be at least 1x1, got {self.width}x{self.height}")
        obstacles = frozenset(Coord(*o) for o in self.obstacles)
        for o in obstacles:
            if not self.in_bounds(o):
                raise ValueError(f"obstacle {o} outside {self.width}x{self.height} map")
        object.__setattr__(self, "obstacles", obstacles)

    @classmethod
    def empty(cls, width: int, height: int, name: str = "") -> GridMap:
        return cls(width, height, frozenset(), name or f"empty-{width}-{height}")

    @property
    def num_cells(self) -> int:
        return self.width * self.height

    def in_bounds(self, c: Coord) -> bool:
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    def free_cells(self) -> list[Coord]:
        """Free cells in row-major order (ascending y, then x)."""
        return [
            Coord(x, y)
            for y in range(self.height)
            for x in range(self.width)
            if Coord(x, y) not in self.obstacles
        ]


def is_free(m: GridMap, c: Coord) -> bool:
    return m.in_bounds(c) and Coord(*c) not in m.obstacles


def valid_actions(m: GridMap, c: Coord) -> list[tuple[Action, Coord]]:
    """Actions from ``c`` that land on a free cell, in canonical order.

    Only obstacles and map bounds matter; other agents are ignored.
    """
    c = Coord(*c)
    if not is_free(m, c):
        raise ValueError(f"{c} is not a free cell")
    out = []
    for a in ACTION_ORDER:
        target = apply_action(c, a)
        if is_free(m, target):
            out.append((a, target))
    return out


@dataclass(frozen=True)
class Instance:
    map: GridMap
    starts: tuple[Coord, ...]
    goals: tuple[Coord, ...]

    def __post_init__(self) -> None:
        starts = tuple(Coord(*s) for s in self.starts)
        goals = tuple(Coord(*g) for g in self.goals)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "goals", goals)
        if not starts:
            raise ValueError("instance needs at least one agent")
        if len(starts) != len(goals):
            raise ValueError(f"{len(starts)} starts but {len(goals)} goals")
        for label, cells in (("start", starts), ("goal", goals)):
            for i, c in enumerate(cells, start=1):
                if not is_free(self.map, c):
                    raise ValueError(f"agent {i} {label} {c} is blocked or out of bounds")
            if len(set(cells)) != len(cells):
                raise ValueError(f"duplicate {label} cells")

    @property
    def n(self) -> int:
        return len(self.starts)

    def with_starts(self, starts: Sequence[Coord]) -> Instance:
        return Instance(self.map, tuple(starts), self.goals)

    def at_goals(self, config: Sequence[Coord]) -> bool:
        return tuple(config) == self.goals
