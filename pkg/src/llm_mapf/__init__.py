"""Multi-agent path finding with an LLM in the loop."""

from .grid import Action, Coord, GridMap, Instance, apply_action, is_free, valid_actions
from .loop import LoopConfig, RunResult, solve, solve_os, solve_sbs
from .prompting import PromptVariant
from .search import joint_optimal, makespan_lower_bound, prioritized_plan
from .validator import Violation, check_plan, check_step

__all__ = [
    "Action",
    "Coord",
    "GridMap",
    "Instance",
    "LoopConfig",
    "PromptVariant",
    "RunResult",
    "Violation",
    "apply_action",
    "check_plan",
    "check_step",
    "is_free",
    "joint_optimal",
    "makespan_lower_bound",
    "prioritized_plan",
    "solve",
    "solve_os",
    "solve_sbs",
    "valid_actions",
]
