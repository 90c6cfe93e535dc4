"""The query / check / feedback loop, step-by-step and one-shot."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from .backend import Backend, BackendError, ChatSession, RateLimitError, Usage
from .grid import Coord, Instance, JointConfig
from .prompting import (
    Message,
    Mode,
    ParseError,
    PromptVariant,
    describe_map,
    feedback_message,
    os_feedback_message,
    os_incomplete_message,
    os_too_long_message,
    parse_error_message,
    parse_response,
    scenario_prompt,
    sso_lines,
    system_prompt,
)
from .search import JOINT_MAX_AGENTS, JOINT_MAX_CELLS, joint_optimal, makespan_lower_bound
from .validator import ValidationReport, check_plan, check_step

log = logging.getLogger(__name__)

SUCCESS = "success"
FAIL_MAKESPAN = "fail_makespan"
FAIL_ITERATIONS = "fail_iterations"
FAIL_BACKEND = "fail_backend"


@dataclass
class LoopConfig:
    variant: PromptVariant = field(default_factory=PromptVariant)
    max_consecutive_failures: int = 5
    makespan_multiplier: float = 3.0
    context_budget_tokens: int = 100_000
    restart_on_rate_limit: bool = True
    max_restarts: int = 200
    timeout_s: float = 30 * 60
    model_id: str = ""
    temperature: float = 1.0
    seed: int = 42
    map_description: str | None = None

    def __post_init__(self) -> None:
        if self.max_consecutive_failures < 1:
            raise ValueError("max_consecutive_failures must be >= 1")
        if self.makespan_multiplier < 1:
            raise ValueError("makespan_multiplier must be >= 1")


@dataclass
class RunResult:
    status: str
    plan_so_far: list[JointConfig]
    lower_bound: int
    optimal_reference: int
    optimal_reference_kind: str
    makespan: int | None = None
    makespan_ratio: float | None = None
    iterations_per_step: list[int] = field(default_factory=list)
    restarts: int = 0
    token_log: list[dict] = field(default_factory=list)
    iteration_log: list[dict] = field(default_factory=list)
    transcript: list[dict] = field(default_factory=list)
    failed_corrections: int = 0
    error: str | None = None

    @property
    def success(self) -> bool:
        return self.status == SUCCESS

    @property
    def steps_taken(self) -> int:
        return len(self.plan_so_far) - 1

    @property
    def total_tokens(self) -> int:
        return sum(e["prompt_tokens"] + e["completion_tokens"] for e in self.token_log)

    def to_record(self, include_transcript: bool = False) -> dict:
        d = asdict(self)
        d["plan_so_far"] = [[list(c) for c in config] for config in self.plan_so_far]
        if not include_transcript:
            d.pop("transcript")
        return d

    @classmethod
    def from_record(cls, d: dict) -> RunResult:
        d = dict(d)
        d["plan_so_far"] = [tuple(Coord(*c) for c in config) for config in d["plan_so_far"]]
        d.setdefault("transcript", [])
        return cls(**d)


def optimal_reference(inst: Instance) -> tuple[int, str]:
    """Exact optimum when the joint search is affordable, else the lower bound."""
    if inst.n <= JOINT_MAX_AGENTS and inst.map.num_cells <= JOINT_MAX_CELLS:
        return joint_optimal(inst), "joint_optimal"
    return makespan_lower_bound(inst), "lower_bound"


def write_transcript(records: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


class _Run:
    """Mutable bookkeeping shared by both loop modes."""

    def __init__(self, inst: Instance, cfg: LoopConfig, backend: Backend, clock: Callable[[], float]):
        self.inst = inst
        self.cfg = cfg
        self.backend = backend
        self.clock = clock
        self.started = clock()
        self.lb = makespan_lower_bound(inst)
        self.opt, self.opt_kind = optimal_reference(inst)
        self.limit = math.floor(cfg.makespan_multiplier * self.opt + 1e-9)
        self.plan: list[JointConfig] = [inst.starts]
        self.session: ChatSession | None = None
        self.session_index = -1
        self.restarts = 0
        self.transcript: list[dict] = []
        self.iteration_log: list[dict] = []
        self.token_log: list[dict] = []
        self.iterations_per_step: list[int] = []
        self.map_description = cfg.map_description if cfg.map_description is not None else describe_map(inst.map)

    def timed_out(self) -> bool:
        return self.clock() - self.started > self.cfg.timeout_s

    def new_session(self, mode: Mode, step: int) -> None:
        self.session_index += 1
        self.session = ChatSession(self.backend, self.cfg.model_id, self.cfg.temperature, self.cfg.seed)
        msg = system_prompt(self.map_description, mode)
        self.session.send(msg)
        self._record(msg, step, 0)

    def _record(self, msg: Message, step: int, iteration: int, usage: Usage | None = None) -> None:
        rec = {
            "session": self.session_index,
            "step": step,
            "iteration": iteration,
            "role": msg.role,
            "text": msg.text,
            "time": self.clock(),
        }
        if msg.image is not None:
            rec["image"] = "map.png"
        if usage is not None:
            rec["usage"] = {"prompt_tokens": usage.prompt_tokens, "completion_tokens": usage.completion_tokens}
        self.transcript.append(rec)

    def send(self, msg: Message, step: int, iteration: int) -> str:
        assert self.session is not None
        self._record(msg, step, iteration)
        text, usage = self.session.send(msg)
        self._record(Message("assistant", text), step, iteration, usage)
        while len(self.token_log) < step:
            self.token_log.append({"step": len(self.token_log) + 1, "prompt_tokens": 0, "completion_tokens": 0})
        entry = self.token_log[step - 1]
        entry["prompt_tokens"] += usage.prompt_tokens
        entry["completion_tokens"] += usage.completion_tokens
        return text

    def over_budget(self) -> bool:
        return self.session is not None and self.session.usage.total > self.cfg.context_budget_tokens

    def result(self, status: str, failed_corrections: int = 0, error: str | None = None) -> RunResult:
        makespan = ratio = None
        if status == SUCCESS:
            makespan = len(self.plan) - 1
            ratio = makespan / self.lb if self.lb else None
        return RunResult(
            status=status,
            plan_so_far=list(self.plan),
            lower_bound=self.lb,
            optimal_reference=self.opt,
            optimal_reference_kind=self.opt_kind,
            makespan=makespan,
            makespan_ratio=ratio,
            iterations_per_step=list(self.iterations_per_step),
            restarts=self.restarts,
            token_log=self.token_log,
            iteration_log=self.iteration_log,
            transcript=self.transcript,
            failed_corrections=failed_corrections,
            error=error,
        )


def solve_sbs(
    inst: Instance, cfg: LoopConfig, backend: Backend, clock: Callable[[], float] = time.monotonic
) -> RunResult:
    """Ask for one joint move at a time, checking each before it is executed.

    A step fails when ``cfg.max_consecutive_failures`` corrective answers
    (answers given after failure feedback at that step) are all invalid. The
    session restarts from the current positions when its cumulative token
    usage exceeds the budget or the backend reports a rate limit.
    """
    run = _Run(inst, cfg, backend, clock)
    if inst.at_goals(inst.starts):
        return run.result(SUCCESS)

    variant = cfg.variant
    config = inst.starts
    step = 1
    iteration = 0
    failed_corrections = 0
    msg: Message | None = None
    while True:
        if run.timed_out():
            return run.result(FAIL_BACKEND, failed_corrections, "wall-clock timeout")
        if run.session is None:
            try:
                run.new_session(Mode.SBS, step)
            except BackendError as e:
                return run.result(FAIL_BACKEND, failed_corrections, str(e))
            msg = scenario_prompt(inst.with_starts(config), variant)
        assert msg is not None
        try:
            text = run.send(msg, step, iteration + 1)
        except RateLimitError as e:
            if not cfg.restart_on_rate_limit or run.restarts >= cfg.max_restarts:
                return run.result(FAIL_BACKEND, failed_corrections, str(e))
            log.info("rate limited at step %d, restarting session", step)
            run.restarts += 1
            run.session = None
            continue
        except BackendError as e:
            return run.result(FAIL_BACKEND, failed_corrections, str(e))
        iteration += 1

        entry: dict = {"session": run.session_index, "step": step, "iteration": iteration}
        report: ValidationReport | None = None
        try:
            proposed = parse_response(text, inst.n, Mode.SBS)
        except ParseError as e:
            entry["parse_error"] = str(e)
            feedback = parse_error_message(e)
        else:
            entry["proposed"] = [list(c) for c in proposed]
            report = check_step(inst.map, config, proposed)
            entry["violations"] = [v.to_dict() for v in report.violations]
            feedback = ""

        if report is not None and report.valid:
            entry["accepted"] = True
            run.iteration_log.append(entry)
            config = proposed
            run.plan.append(config)
            run.iterations_per_step.append(iteration)
            if len(run.plan) - 1 > run.limit:
                return run.result(FAIL_MAKESPAN)
            if inst.at_goals(config):
                return run.result(SUCCESS)
            step += 1
            iteration = 0
            failed_corrections = 0
            if run.over_budget():
                run.restarts += 1
                run.session = None
                continue
            msg = Message("user", feedback_message(report, sso_lines(inst.map, config) if variant.sso else None))
            continue

        if report is not None:
            feedback = feedback_message(report)
        entry["accepted"] = False
        entry["feedback"] = feedback
        run.iteration_log.append(entry)
        if iteration > 1:
            failed_corrections += 1
            if failed_corrections >= cfg.max_consecutive_failures:
                return run.result(FAIL_ITERATIONS, failed_corrections)
        if run.over_budget():
            run.restarts += 1
            run.session = None
            continue
        msg = Message("user", feedback)


def solve_os(
    inst: Instance, cfg: LoopConfig, backend: Backend, clock: Callable[[], float] = time.monotonic
) -> RunResult:
    """Ask for the whole plan at once; retry with feedback on the first bad step.

    At most ``cfg.max_consecutive_failures`` answers are requested in total.
    """
    run = _Run(inst, cfg, backend, clock)
    if inst.at_goals(inst.starts):
        return run.result(SUCCESS)

    attempts = 0
    msg: Message | None = None
    last_status = FAIL_ITERATIONS
    while attempts < cfg.max_consecutive_failures:
        if run.timed_out():
            return run.result(FAIL_BACKEND, attempts, "wall-clock timeout")
        if run.session is None:
            try:
                run.new_session(Mode.OS, 1)
            except BackendError as e:
                return run.result(FAIL_BACKEND, attempts, str(e))
            msg = scenario_prompt(inst, cfg.variant)
        assert msg is not None
        try:
            text = run.send(msg, 1, attempts + 1)
        except RateLimitError as e:
            if not cfg.restart_on_rate_limit or run.restarts >= cfg.max_restarts:
                return run.result(FAIL_BACKEND, attempts, str(e))
            run.restarts += 1
            run.session = None
            continue
        except BackendError as e:
            return run.result(FAIL_BACKEND, attempts, str(e))
        attempts += 1
        entry: dict = {"session": run.session_index, "step": 1, "iteration": attempts}

        try:
            steps = parse_response(text, inst.n, Mode.OS)
        except ParseError as e:
            entry.update(parse_error=str(e), accepted=False)
            feedback = parse_error_message(e)
            last_status = FAIL_ITERATIONS
        else:
            candidate = [inst.starts, *steps]
            report = check_plan(inst, candidate)
            entry["proposed_steps"] = len(steps)
            entry["violations"] = [v.to_dict() for v in report.violations]
            bad = report.first_invalid_step
            # keep the longest checked prefix
            prefix = candidate[: bad if bad is not None else len(candidate)]
            if len(prefix) > len(run.plan):
                run.plan = prefix
            if bad is not None:
                feedback = os_feedback_message(bad, report.steps[bad - 1])
                last_status = FAIL_ITERATIONS
            elif report.makespan is None:
                missing = [i for i, (c, g) in enumerate(zip(candidate[-1], inst.goals), start=1) if c != g]
                feedback = os_incomplete_message(missing)
                last_status = FAIL_ITERATIONS
            elif report.makespan > run.limit:
                feedback = os_too_long_message(report.makespan, run.limit)
                last_status = FAIL_MAKESPAN
            else:
                run.plan = candidate[: report.makespan + 1]
                entry["accepted"] = True
                run.iteration_log.append(entry)
                run.iterations_per_step.append(attempts)
                return run.result(SUCCESS)
            entry["accepted"] = False
        entry["feedback"] = feedback
        run.iteration_log.append(entry)
        if run.over_budget():
            run.restarts += 1
            run.session = None
            continue
        msg = Message("user", feedback)
    return run.result(last_status, attempts)


def solve(inst: Instance, cfg: LoopConfig, backend: Backend, **kw) -> RunResult:
    if cfg.variant.mode is Mode.OS:
        return solve_os(inst, cfg, backend, **kw)
    return solve_sbs(inst, cfg, backend, **kw)
