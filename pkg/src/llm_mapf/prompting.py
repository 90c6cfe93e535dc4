"""Prompt construction and response parsing.

Every builder here is byte-stable: golden files under ``tests/golden``
pin the exact output.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .bench_io import MapImage, render_ascii, render_image
from .grid import Action, Coord, GridMap, Instance, JointConfig, valid_actions
from .validator import ValidationReport

log = logging.getLogger(__name__)

MAP_SLOT = "[[Map Description]]"


class MapEncoding(str, Enum):
    NONE = "none"
    TOM = "tom"  # ASCII map text
    TOO = "too"  # obstacle coordinate list
    MM = "mm"  # image attachment


class Mode(str, Enum):
    SBS = "sbs"
    OS = "os"


@dataclass(frozen=True)
class PromptVariant:
    map_encoding: MapEncoding = MapEncoding.TOM
    sso: bool = True
    mode: Mode = Mode.SBS

    def __post_init__(self) -> None:
        object.__setattr__(self, "map_encoding", MapEncoding(self.map_encoding))
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def label(self) -> str:
        enc = self.map_encoding.value.upper()
        return f"{self.mode.value.upper()}-{enc}{'+SSO' if self.sso else ''}"


@dataclass
class Message:
    role: str
    text: str
    image: MapImage | None = None


@lru_cache(maxsize=None)
def _template(name: str) -> str:
    return resources.files("llm_mapf").joinpath(f"assets/{name}").read_text().rstrip("\n")


def describe_map(m: GridMap) -> str:
    """Wording for the map slot of the system prompt."""
    size = f"{m.width}*{m.height}"
    kind = m.name.split("-", 1)[0] if m.name else ""
    if kind == "empty" or not m.obstacles:
        return f"a map with size {size} and no obstacle"
    if kind in ("room", "maze"):
        return f"{kind}-like map with size {size}"
    return f"map with size {size}"


def system_prompt(map_description: str, mode: Mode = Mode.SBS) -> Message:
    if not map_description:
        log.warning("empty map description in system prompt")
    name = "system_os.txt" if Mode(mode) is Mode.OS else "system_sbs.txt"
    return Message("system", _template(name).replace(MAP_SLOT, map_description))


def _pos(c: Coord) -> str:
    return f"({c[0]},{c[1]})"


def _spaced_pos(c: Coord) -> str:
    return f"({c[0]}, {c[1]})"


def sso_line(agent_id: int, m: GridMap, c: Coord) -> str:
    entries = []
    for action, target in valid_actions(m, c):
        verb = "stay at" if action is Action.STAY else f"{action.value} to"
        entries.append(f"'{verb} {_spaced_pos(target)}'")
    return f"Agent {agent_id} can move [{', '.join(entries)}]."


def sso_lines(m: GridMap, config: Sequence[Coord]) -> list[str]:
    return [sso_line(i, m, c) for i, c in enumerate(config, start=1)]


def scenario_prompt(inst: Instance, v: PromptVariant) -> Message:
    m = inst.map
    lines = [
        f"Agent {i} is currently in {_pos(s)}, and wants to go to {_pos(g)}."
        for i, (s, g) in enumerate(zip(inst.starts, inst.goals), start=1)
    ]
    image = None
    if v.map_encoding is MapEncoding.TOM:
        lines.append(
            "The map is as follows, where '@' denotes a cell with an obstacle that an agent "
            "cannot pass, and '.' denotes an empty cell that an agent can pass."
        )
        lines.append(f"The bottom-left cell is (0,0) and the bottom-right cell is ({m.width - 1},0):")
        lines.extend(render_ascii(m).split("\n"))
    elif v.map_encoding is MapEncoding.TOO:
        obstacles = sorted(m.obstacles, key=lambda c: (c.y, c.x))
        lines.append(f"The bottom-left cell is (0,0) and the bottom-right cell is ({m.width - 1},0).")
        lines.append("The obstacles are located at: " + ", ".join(_pos(c) for c in obstacles) + ".")
    elif v.map_encoding is MapEncoding.MM:
        lines.append(
            "The map is given in the attached image, where black cells are obstacles that an "
            "agent cannot pass and white cells are empty cells that an agent can pass. "
            f"The bottom-left cell is (0,0) and the bottom-right cell is ({m.width - 1},0)."
        )
        image = render_image(m)
    if v.sso:
        lines.append("In the next step:")
        lines.extend(sso_lines(m, inst.starts))
    return Message("user", "\n".join(lines), image)


# -- feedback ---------------------------------------------------------------

CORRECT = "Please correct the current step."


def _failure_sentences(report: ValidationReport) -> list[str]:
    out = []
    groups = report.of_kind("vertex_conflict")
    if groups:
        named = ", ".join("(" + ",".join(str(a) for a in g.agents) + ")" for g in groups)
        out.append(f"You are wrong. Agent {named} are colliding with each other. {CORRECT}")
    hits = report.of_kind("obstacle_collision")
    if hits:
        ids = ",".join(str(a) for v in hits for a in v.agents)
        out.append(f"You are wrong. Agent {ids} is colliding with obstacles. {CORRECT}")
    for v in report.of_kind("illegal_move"):
        src, dst = v.cells
        out.append(
            f"You are wrong. Agent {v.agents[0]} cannot move from {_pos(src)} to {_pos(dst)} "
            f"in a single step. {CORRECT}"
        )
    for v in report.of_kind("out_of_bounds"):
        out.append(f"You are wrong. Agent {v.agents[0]} is leaving the map at {_pos(v.cells[0])}. {CORRECT}")
    return out


def feedback_message(report: ValidationReport, next_sso: Sequence[str] | None = None) -> str:
    if report.valid:
        if next_sso:
            return "\n".join(["Good job. Keep moving. In the next step:", *next_sso])
        return "Good job. Keep moving."
    return "\n".join(_failure_sentences(report))


def parse_error_message(err: ParseError) -> str:
    return (
        f"You are wrong. Your answer could not be read: {err}. End your output with the validated "
        f"solution, one line per agent in the form 'Agent 1: (x,y)'. {CORRECT}"
    )


def os_feedback_message(step: int, report: ValidationReport) -> str:
    lines = [f"Step {step} of your plan is invalid."]
    lines.extend(s.replace(CORRECT, "Please correct the plan.") for s in _failure_sentences(report))
    return "\n".join(lines)


def os_incomplete_message(missing: Sequence[int]) -> str:
    ids = ",".join(str(a) for a in missing)
    return f"You are wrong. Agent {ids} has not reached its goal at the end of your plan. Please correct the plan."


def os_too_long_message(steps: int, limit: int) -> str:
    return (
        f"You are wrong. Your plan takes {steps} steps, which is more than the allowed {limit} steps. "
        "Please correct the plan."
    )


# -- parsing model output ---------------------------------------------------


class ParseError(ValueError):
    pass


_AGENT_LINE = re.compile(
    r"Agent[\s_]*(\d+)\W*?:[\s*]*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)[\s.,;*]*$", re.IGNORECASE
)
_AGENTISH = re.compile(r"Agent[\s_]*(\d+)\W*?:[\s*]*\(", re.IGNORECASE)
_STEP_LINE = re.compile(r"^\W*Step\s*(\d+)\b[^:]*:\s*\**\s*$", re.IGNORECASE)


def format_config(config: Sequence[Coord]) -> str:
    """Render a joint configuration in the expected final-answer format."""
    return "\n".join(f"Agent {i}: {_pos(c)}" for i, c in enumerate(config, start=1))


def _blocks(lines: list[str]) -> list[list[tuple[int, str]]]:
    """Maximal runs of agent-coordinate lines; blank lines do not break a run."""
    blocks: list[list[tuple[int, str]]] = []
    current: list[tuple[int, str]] = []
    for idx, raw in enumerate(lines):
        line = raw.strip()
        if not line:
            continue
        if _AGENTISH.search(line):
            current.append((idx, line))
        elif current:
            blocks.append(current)
            current = []
    if current:
        blocks.append(current)
    return blocks


def _block_config(block: list[tuple[int, str]], n: int) -> JointConfig:
    found: dict[int, Coord] = {}
    for _, line in block:
        m = _AGENT_LINE.search(line)
        if m is None:
            raise ParseError(f"malformed coordinate in {line!r}")
        agent, x, y = int(m.group(1)), int(m.group(2)), int(m.group(3))
        if agent in found:
            raise ParseError(f"agent {agent} listed twice")
        found[agent] = Coord(x, y)
    extra = sorted(a for a in found if not 1 <= a <= n)
    if extra:
        raise ParseError(f"unknown agent ids {extra}")
    missing = [a for a in range(1, n + 1) if a not in found]
    if missing:
        raise ParseError(f"missing agent ids {missing}")
    return tuple(found[a] for a in range(1, n + 1))


def parse_response(text: str, n: int, mode: Mode = Mode.SBS) -> JointConfig | list[JointConfig]:
    """Extract the final answer from model output.

    SBS: the last block of ``Agent i: (x,y)`` lines, covering every agent
    exactly once. OS: the blocks following ``Step t:`` labels for t = 1..T;
    when a step is repeated the later block wins.
    """
    lines = text.splitlines()
    if Mode(mode) is Mode.SBS:
        blocks = _blocks(lines)
        if not blocks:
            raise ParseError("no block of 'Agent i: (x,y)' lines found")
        return _block_config(blocks[-1], n)

    labels = [(i, int(m.group(1))) for i, ln in enumerate(lines) if (m := _STEP_LINE.match(ln.strip()))]
    by_step: dict[int, JointConfig] = {}
    for k, (line_idx, step) in enumerate(labels):
        end = labels[k + 1][0] if k + 1 < len(labels) else len(lines)
        blocks = _blocks(lines[line_idx + 1 : end])
        coord_blocks = [b for b in blocks if any(_AGENT_LINE.search(ln) for _, ln in b)]
        if not coord_blocks:
            continue
        by_step[step] = _block_config(coord_blocks[-1], n)
    by_step.pop(0, None)
    if not by_step:
        raise ParseError("no 'Step t:' blocks with agent coordinates found")
    steps = sorted(by_step)
    if steps != list(range(1, len(steps) + 1)):
        raise ParseError(f"step labels must run 1..T without gaps, got {steps}")
    return [by_step[t] for t in steps]
