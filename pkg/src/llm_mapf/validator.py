"""Rule-based checker for single steps and whole plans.

Only vertex conflicts count as agent-agent collisions; two agents swapping
cells in one step is allowed.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

from .grid import Coord, GridMap, Instance, JointConfig, is_adjacent_or_same

_KIND_ORDER = {"out_of_bounds": 0, "illegal_move": 1, "obstacle_collision": 2, "vertex_conflict": 3}


@dataclass(frozen=True)
class Violation:
    """One invalidity found by the checker.

    ``agents`` holds 1-based agent ids in ascending order. ``cells`` holds the
    cell involved (vertex conflict, out of bounds), one cell per agent
    (obstacle collision), or ``(from, to)`` for an illegal move.
    """

    kind: str
    agents: tuple[int, ...]
    cells: tuple[Coord, ...] = ()

    @classmethod
    def vertex_conflict(cls, agent_ids, cell: Coord) -> Violation:
        ids = tuple(sorted(agent_ids))
        if len(ids) < 2:
            raise ValueError("a vertex conflict needs at least two agents")
        return cls("vertex_conflict", ids, (Coord(*cell),))

    @classmethod
    def obstacle_collision(cls, agent_ids, cells=()) -> Violation:
        return cls("obstacle_collision", tuple(agent_ids), tuple(Coord(*c) for c in cells))

    @classmethod
    def illegal_move(cls, agent_id: int, src: Coord, dst: Coord) -> Violation:
        return cls("illegal_move", (agent_id,), (Coord(*src), Coord(*dst)))

    @classmethod
    def out_of_bounds(cls, agent_id: int, cell: Coord) -> Violation:
        return cls("out_of_bounds", (agent_id,), (Coord(*cell),))

    def sort_key(self):
        return (_KIND_ORDER[self.kind], self.agents, self.cells)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "agents": list(self.agents), "cells": [list(c) for c in self.cells]}

    @classmethod
    def from_dict(cls, d: dict) -> Violation:
        return cls(d["kind"], tuple(d["agents"]), tuple(Coord(*c) for c in d["cells"]))

    def describe(self) -> str:
        if self.kind == "vertex_conflict":
            return f"agents {list(self.agents)} collide at {self.cells[0]}"
        if self.kind == "obstacle_collision":
            return f"agents {list(self.agents)} hit obstacles at {[str(c) for c in self.cells]}"
        if self.kind == "illegal_move":
            return f"agent {self.agents[0]} jumps from {self.cells[0]} to {self.cells[1]}"
        return f"agent {self.agents[0]} leaves the map at {self.cells[0]}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    def of_kind(self, kind: str) -> list[Violation]:
        return [v for v in self.violations if v.kind == kind]

    def to_dict(self) -> dict:
        return {"valid": self.valid, "violations": [v.to_dict() for v in self.violations]}


def check_step(m: GridMap, current: Sequence[Coord], proposed: Sequence[Coord]) -> ValidationReport:
    if len(current) != len(proposed):
        raise ValueError(f"current has {len(current)} agents, proposed has {len(proposed)}")
    found: list[Violation] = []
    blocked: list[tuple[int, Coord]] = []
    by_cell: dict[Coord, list[int]] = defaultdict(list)
    for i, (src, dst) in enumerate(zip(current, proposed), start=1):
        src, dst = Coord(*src), Coord(*dst)
        inside = m.in_bounds(dst)
        if not inside:
            found.append(Violation.out_of_bounds(i, dst))
        if not is_adjacent_or_same(src, dst):
            found.append(Violation.illegal_move(i, src, dst))
        if inside and dst in m.obstacles:
            blocked.append((i, dst))
        by_cell[dst].append(i)
    if blocked:
        found.append(Violation.obstacle_collision([i for i, _ in blocked], [c for _, c in blocked]))
    for cell, ids in by_cell.items():
        if len(ids) > 1:
            found.append(Violation.vertex_conflict(ids, cell))
    return ValidationReport(tuple(sorted(found, key=Violation.sort_key)))


@dataclass
class PlanReport:
    """Outcome of checking a whole plan step by step.

    ``steps[t]`` is the report for the move from config ``t`` to ``t + 1``.
    """

    steps: list[ValidationReport] = field(default_factory=list)
    reaches_goals: bool = False
    makespan: int | None = None

    @property
    def valid(self) -> bool:
        return all(r.valid for r in self.steps)

    @property
    def first_invalid_step(self) -> int | None:
        """1-based index of the first step (move into config t) with violations."""
        for t, r in enumerate(self.steps, start=1):
            if not r.valid:
                return t
        return None

    @property
    def violations(self) -> tuple[Violation, ...]:
        return tuple(v for r in self.steps for v in r.violations)

    @property
    def solved(self) -> bool:
        return self.valid and self.reaches_goals


def check_plan(inst: Instance, plan: Sequence[JointConfig]) -> PlanReport:
    if not plan:
        raise ValueError("empty plan")
    if tuple(plan[0]) != inst.starts:
        raise ValueError("plan step 0 must equal the instance starts")
    report = PlanReport()
    for prev, nxt in zip(plan, plan[1:]):
        if len(nxt) != inst.n:
            raise ValueError(f"plan config has {len(nxt)} agents, expected {inst.n}")
        report.steps.append(check_step(inst.map, prev, nxt))
    report.reaches_goals = inst.at_goals(plan[-1])
    for t, config in enumerate(plan):
        if inst.at_goals(config):
            report.makespan = t
            break
    return report
