from pathlib import Path

import pytest

from llm_mapf.bench_io import parse_map
from llm_mapf.grid import Coord, Instance

HERE = Path(__file__).parent
DATA_DIR = HERE / "data" / "benchmarks"
GOLDEN_DIR = HERE / "golden"

EXAMPLE_MAP_TEXT = "type octile\nheight 4\nwidth 4\nmap\n....\n...@\n....\n.@..\n"


def golden(name: str) -> str:
    return (GOLDEN_DIR / name).read_text()


@pytest.fixture
def example_map():
    return parse_map(EXAMPLE_MAP_TEXT, name="symmetry-4-4")


@pytest.fixture
def symmetry(example_map):
    """Two agents whose shortest paths all meet in cell (1,2)."""
    return Instance(example_map, (Coord(0, 2), Coord(1, 3)), (Coord(3, 1), Coord(2, 0)))


# Detour solution: agent 2 steps left first, total makespan 6.
DETOUR_PLAN = [
    ((0, 2), (1, 3)),
    ((0, 1), (0, 3)),
    ((1, 1), (0, 2)),
    ((2, 1), (1, 2)),
    ((3, 1), (2, 2)),
    ((3, 1), (2, 1)),
    ((3, 1), (2, 0)),
]


@pytest.fixture
def detour_plan():
    return [tuple(Coord(*c) for c in step) for step in DETOUR_PLAN]


# -- acceptance summary -----------------------------------------------------

_CRITERIA: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: int(s.split("_")[2])):
        num, label = name.split("_")[2], " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {num} ({label}): {_CRITERIA[name]}")
