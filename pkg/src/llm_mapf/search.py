"""Classic search: BFS distance fields, makespan bounds, a prioritized
space-time A* planner and exact joint-state search for tiny instances."""

from __future__ import annotations

import heapq
import itertools
import random
import re
from collections import deque
from dataclasses import dataclass
from typing import Sequence

from .grid import Coord, GridMap, Instance, JointConfig, is_free, valid_actions

UNREACHABLE = -1

JOINT_MAX_AGENTS = 3
JOINT_MAX_CELLS = 64


class PlanningError(RuntimeError):
    pass


class DistanceField:
    def __init__(self, m: GridMap, source: Coord, dist: dict[Coord, int]):
        self.map = m
        self.source = source
        self._dist = dist

    def __getitem__(self, c: Coord) -> int:
        return self._dist.get(Coord(*c), UNREACHABLE)

    def reachable(self, c: Coord) -> bool:
        return Coord(*c) in self._dist


def bfs_distances(m: GridMap, source: Coord) -> DistanceField:
    source = Coord(*source)
    if not is_free(m, source):
        raise ValueError(f"BFS source {source} is blocked")
    dist = {source: 0}
    queue = deque([source])
    while queue:
        c = queue.popleft()
        d = dist[c] + 1
        for _, nb in valid_actions(m, c)[1:]:
            if nb not in dist:
                dist[nb] = d
                queue.append(nb)
    return DistanceField(m, source, dist)


def makespan_lower_bound(inst: Instance) -> int:
    """Longest single-agent shortest path over all agents."""
    best = 0
    for i, (s, g) in enumerate(zip(inst.starts, inst.goals), start=1):
        d = bfs_distances(inst.map, g)[s]
        if d == UNREACHABLE:
            raise PlanningError(f"agent {i} cannot reach its goal {g} from {s}")
        best = max(best, d)
    return best


@dataclass(frozen=True)
class Plan:
    steps: tuple[JointConfig, ...]

    @property
    def makespan(self) -> int:
        return len(self.steps) - 1

    def path(self, agent: int) -> list[Coord]:
        """Trajectory of 1-based ``agent``."""
        return [config[agent - 1] for config in self.steps]


def _space_time_astar(
    m: GridMap,
    start: Coord,
    goal: Coord,
    h: DistanceField,
    occupied: dict[int, set[Coord]],
    parked: dict[Coord, int],
    horizon: int,
) -> list[Coord] | None:
    """Shortest path for one agent avoiding space-time vertex reservations.

    ``occupied[t]`` are cells taken by earlier agents at time t; ``parked[c]``
    is the time from which an earlier agent sits on ``c`` forever. The agent
    may only finish once no earlier agent passes over its goal again.
    """
    finish_after = max((t + 1 for t, cells in occupied.items() if goal in cells), default=0)
    if goal in parked:
        return None

    def blocked(c: Coord, t: int) -> bool:
        if c in parked and t >= parked[c]:
            return True
        cells = occupied.get(t)
        return cells is not None and c in cells

    if blocked(start, 0):
        return None
    tie = itertools.count()
    open_heap = [(h[start], 0, next(tie), start, 0)]
    parent: dict[tuple[Coord, int], tuple[Coord, int] | None] = {(start, 0): None}
    while open_heap:
        _, _, _, c, t = heapq.heappop(open_heap)
        if c == goal and t >= finish_after:
            path = []
            node: tuple[Coord, int] | None = (c, t)
            while node is not None:
                path.append(node[0])
                node = parent[node]
            return path[::-1]
        if t >= horizon:
            continue
        for _, nb in valid_actions(m, c):
            nt = t + 1
            if (nb, nt) in parent or blocked(nb, nt):
                continue
            parent[(nb, nt)] = (c, t)
            f = nt + max(h[nb], 0)
            heapq.heappush(open_heap, (f, nt, next(tie), nb, nt))
    return None


def prioritized_plan(inst: Instance, order: Sequence[int] | None = None) -> Plan:
    """Plan agents one at a time (1-based ``order``, default by index).

    Earlier agents' trajectories become vertex reservations; an agent that
    has arrived reserves its goal for all later times. Raises
    :class:`PlanningError` when some agent finds no path within the horizon.
    """
    n = inst.n
    order = list(order) if order is not None else list(range(1, n + 1))
    if sorted(order) != list(range(1, n + 1)):
        raise ValueError(f"order must be a permutation of 1..{n}")
    fields = [bfs_distances(inst.map, g) for g in inst.goals]
    lb = 0
    for i in range(n):
        d = fields[i][inst.starts[i]]
        if d == UNREACHABLE:
            raise PlanningError(f"agent {i + 1} cannot reach its goal")
        lb = max(lb, d)
    horizon = lb + inst.map.num_cells

    occupied: dict[int, set[Coord]] = {}
    parked: dict[Coord, int] = {}
    paths: dict[int, list[Coord]] = {}
    longest = 0
    for agent in order:
        i = agent - 1
        path = _space_time_astar(
            inst.map, inst.starts[i], inst.goals[i], fields[i], occupied, parked, horizon
        )
        if path is None:
            raise PlanningError(f"agent {agent} found no path within horizon {horizon} (order {order})")
        for t, c in enumerate(path):
            occupied.setdefault(t, set()).add(c)
        parked[path[-1]] = len(path) - 1
        paths[agent] = path
        longest = max(longest, len(path) - 1)

    steps = []
    for t in range(longest + 1):
        steps.append(tuple(paths[a][min(t, len(paths[a]) - 1)] for a in range(1, n + 1)))
    return Plan(tuple(steps))


def prioritized_plan_with_restarts(
    inst: Instance, attempts: int = 20, seed: int = 0
) -> Plan:
    """Index order first, then random priority orders until one succeeds."""
    rng = random.Random(seed)
    order = list(range(1, inst.n + 1))
    last: PlanningError | None = None
    for _ in range(max(1, attempts)):
        try:
            return prioritized_plan(inst, order)
        except PlanningError as e:
            last = e
        order = order[:]
        rng.shuffle(order)
    assert last is not None
    raise last


def joint_optimal(inst: Instance) -> int:
    """Exact minimum makespan by breadth-first search over joint configurations.

    Only vertex conflicts are forbidden, matching the checker. Limited to
    tiny instances.
    """
    if inst.n > JOINT_MAX_AGENTS or inst.map.num_cells > JOINT_MAX_CELLS:
        raise ValueError(
            f"joint search limited to n <= {JOINT_MAX_AGENTS} and <= {JOINT_MAX_CELLS} cells "
            f"(got n={inst.n}, {inst.map.num_cells} cells)"
        )
    m = inst.map
    moves = {c: [nb for _, nb in valid_actions(m, c)] for c in m.free_cells()}
    start, goal = inst.starts, inst.goals
    seen = {start}
    frontier = [start]
    depth = 0
    while frontier:
        if goal in seen:
            return depth
        depth += 1
        nxt = []
        for config in frontier:
            for combo in itertools.product(*(moves[c] for c in config)):
                if combo in seen or len(set(combo)) != len(combo):
                    continue
                seen.add(combo)
                nxt.append(combo)
        frontier = nxt
    raise PlanningError("goal configuration unreachable")


# -- plan text format: "t: (x1,y1) (x2,y2) ..." ------------------------------

_COORD_RE = re.compile(r"\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)")


def format_plan(steps: Sequence[JointConfig]) -> str:
    return "".join(
        f"{t}: " + " ".join(f"({c[0]},{c[1]})" for c in config) + "\n" for t, config in enumerate(steps)
    )


def parse_plan(text: str) -> list[JointConfig]:
    steps: list[JointConfig] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        label, sep, rest = line.partition(":")
        if not sep or not label.strip().isdigit():
            raise ValueError(f"line {lineno}: expected 't: (x,y) ...'")
        if int(label) != len(steps):
            raise ValueError(f"line {lineno}: expected step {len(steps)}, got {label.strip()}")
        coords = tuple(Coord(int(x), int(y)) for x, y in _COORD_RE.findall(rest))
        if not coords:
            raise ValueError(f"line {lineno}: no coordinates")
        if steps and len(coords) != len(steps[0]):
            raise ValueError(f"line {lineno}: {len(coords)} agents, expected {len(steps[0])}")
        steps.append(coords)
    if not steps:
        raise ValueError("plan file is empty")
    return steps
