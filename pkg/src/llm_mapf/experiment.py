"""Suite runner, result persistence and report aggregation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
import threading
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import mean
from typing import Iterable

import yaml

from .backend import CyclingBackend, HttpChatBackend, OracleAgent, RateLimiter, ScriptedBackend
from .bench_io import load_benchmark_instance, render_ascii
from .grid import Coord, Instance
from .loop import (
    FAIL_BACKEND,
    FAIL_ITERATIONS,
    FAIL_MAKESPAN,
    SUCCESS,
    LoopConfig,
    RunResult,
    optimal_reference,
    solve,
)
from .prompting import Mode, ParseError, PromptVariant, parse_response
from .validator import check_plan, check_step

log = logging.getLogger(__name__)

OSCILLATION = "oscillation"
LONG_DETOUR = "long_detour"
ITERATION_LIMIT = "iteration_limit"
BACKEND = "backend"
FAILURE_KINDS = (OSCILLATION, LONG_DETOUR, ITERATION_LIMIT, BACKEND)

RESULTS_FILE = "results.jsonl"


@dataclass
class SuiteConfig:
    map_name: str
    data_dir: str = "data"
    scenarios: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    scen_kind: str = "even"
    agent_counts: list[int] = field(default_factory=lambda: [2, 4, 8])
    variants: list[PromptVariant] = field(default_factory=lambda: [PromptVariant()])
    backend: dict = field(default_factory=lambda: {"kind": "oracle"})
    loop: dict = field(default_factory=dict)
    output_dir: str = "results"
    repeats: int = 1
    parallelism: int = 1
    oscillation_k: int = 4

    def __post_init__(self) -> None:
        if not self.scenarios:
            raise ValueError("scenario list is empty")
        if not self.agent_counts:
            raise ValueError("agent count list is empty")
        if not self.variants:
            raise ValueError("variant list is empty")
        self.variants = [v if isinstance(v, PromptVariant) else PromptVariant(**v) for v in self.variants]
        if "kind" not in self.backend:
            raise ValueError("backend needs a 'kind'")

    def loop_config(self, variant: PromptVariant) -> LoopConfig:
        return LoopConfig(variant=variant, **self.loop)


def load_suite_config(path: str | Path) -> SuiteConfig:
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict) or "map_name" not in raw:
        raise ValueError(f"{path}: config must be a mapping with at least 'map_name'")
    base = Path(path).parent
    for key in ("data_dir", "output_dir"):
        if key in raw and not Path(raw[key]).is_absolute():
            raw[key] = str(base / raw[key])
    try:
        return SuiteConfig(**raw)
    except TypeError as e:
        raise ValueError(f"{path}: {e}") from e


def run_id(map_name: str, scenario: int, n: int, variant: PromptVariant, backend: str, seed: int, repeat: int) -> str:
    label = variant.label.replace("+", "_")
    rid = f"{map_name}__s{scenario}__n{n}__{label}__{backend}__seed{seed}__r{repeat}"
    return re.sub(r"[^A-Za-z0-9_.-]", "-", rid)


# -- failure taxonomy -------------------------------------------------------


def cell_entries(path: list[Coord]) -> Counter:
    """How many times the trajectory enters each cell (waiting is one entry)."""
    entries: Counter = Counter()
    prev = None
    for c in path:
        if c != prev:
            entries[tuple(c)] += 1
        prev = c
    return entries


def classify_failure(r: RunResult, k: int = 4) -> str:
    if r.status == SUCCESS:
        raise ValueError("classify_failure called on a successful run")
    if r.status == FAIL_ITERATIONS:
        return ITERATION_LIMIT
    if r.status == FAIL_BACKEND:
        return BACKEND
    if r.status != FAIL_MAKESPAN:
        raise ValueError(f"unknown status {r.status!r}")
    n = len(r.plan_so_far[0]) if r.plan_so_far else 0
    for agent in range(n):
        path = [config[agent] for config in r.plan_so_far]
        if any(count >= k for count in cell_entries(path).values()):
            return OSCILLATION
    return LONG_DETOUR


# -- persistence ------------------------------------------------------------


class ResultSink:
    """Append-only JSON-lines store, safe to share between worker threads."""

    def __init__(self, out_dir: str | Path):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "transcripts").mkdir(exist_ok=True)
        self.path = self.dir / RESULTS_FILE
        self._lock = threading.Lock()

    def completed(self) -> set[str]:
        return {rec["run_id"] for rec in read_records(self.dir)}

    def transcript_path(self, rid: str) -> Path:
        return self.dir / "transcripts" / f"{rid}.jsonl"

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True) + "\n"
        with self._lock, open(self.path, "a") as fh:
            fh.write(line)


def read_records(out_dir: str | Path) -> list[dict]:
    path = Path(out_dir) / RESULTS_FILE
    if not path.exists():
        return []
    records = []
    for line in path.read_text().splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


def instance_meta(inst: Instance) -> dict:
    return {
        "map_name": inst.map.name,
        "map": render_ascii(inst.map),
        "starts": [list(c) for c in inst.starts],
        "goals": [list(c) for c in inst.goals],
    }


def instance_from_meta(meta: dict) -> Instance:
    from .bench_io import parse_map

    rows = meta["map"].split("\n")
    text = f"type octile\nheight {len(rows)}\nwidth {len(rows[0])}\nmap\n" + meta["map"] + "\n"
    m = parse_map(text, name=meta.get("map_name", ""))
    return Instance(m, tuple(Coord(*c) for c in meta["starts"]), tuple(Coord(*c) for c in meta["goals"]))


def save_transcript(
    path: str | Path, inst: Instance, variant: PromptVariant, result: RunResult, makespan_multiplier: float = 3.0
) -> None:
    """Transcript file: a meta line, one line per message, then a result line."""
    with open(path, "w") as fh:
        meta = {
            "type": "meta",
            **instance_meta(inst),
            "variant": _variant_dict(variant),
            "makespan_multiplier": makespan_multiplier,
        }
        fh.write(json.dumps(meta) + "\n")
        for rec in result.transcript:
            fh.write(json.dumps({"type": "message", **rec}) + "\n")
        tail = {
            "type": "result",
            "status": result.status,
            "plan": [[list(c) for c in config] for config in result.plan_so_far],
        }
        fh.write(json.dumps(tail) + "\n")


def _variant_dict(v: PromptVariant) -> dict:
    return {"map_encoding": v.map_encoding.value, "sso": v.sso, "mode": v.mode.value}


@dataclass
class Replay:
    lines: list[str]
    plan: list[tuple[Coord, ...]]
    recorded_plan: list[tuple[Coord, ...]] | None
    recorded_status: str | None

    @property
    def consistent(self) -> bool:
        return self.recorded_plan is None or self.plan == self.recorded_plan


def replay_transcript(path: str | Path) -> Replay:
    """Re-check every model answer in a transcript against the instance.

    The plan is rebuilt from scratch with the same acceptance rule as the
    loop, so it can be compared with the plan the run recorded.
    """
    records = [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not records or records[0].get("type") != "meta":
        raise ValueError(f"{path}: missing meta record")
    meta = records[0]
    inst = instance_from_meta(meta)
    mode = Mode(meta["variant"]["mode"])
    plan: list[tuple[Coord, ...]] = [inst.starts]
    lines = [f"instance {meta.get('map_name') or '?'} with {inst.n} agents, mode {mode.value}"]
    limit = None
    if mode is Mode.OS:
        opt, _ = optimal_reference(inst)
        limit = math.floor(meta.get("makespan_multiplier", 3.0) * opt + 1e-9)
    recorded_plan = recorded_status = None
    for rec in records[1:]:
        if rec.get("type") == "result":
            recorded_status = rec["status"]
            recorded_plan = [tuple(Coord(*c) for c in config) for config in rec["plan"]]
            continue
        if rec.get("role") != "assistant":
            continue
        where = f"session {rec['session']} step {rec['step']} iteration {rec['iteration']}"
        try:
            parsed = parse_response(rec["text"], inst.n, mode)
        except ParseError as e:
            lines.append(f"{where}: parse error: {e}")
            continue
        if mode is Mode.SBS:
            report = check_step(inst.map, plan[-1], parsed)
            if report.valid:
                plan.append(parsed)
                lines.append(f"{where}: ok -> " + " ".join(str(c) for c in parsed))
            else:
                lines.extend(f"{where}: {v.describe()}" for v in report.violations)
            continue
        candidate = [inst.starts, *parsed]
        preport = check_plan(inst, candidate)
        bad = preport.first_invalid_step
        prefix = candidate[: bad if bad is not None else len(candidate)]
        if bad is None and preport.makespan is not None and preport.makespan <= limit:
            plan = candidate[: preport.makespan + 1]
            lines.append(f"{where}: valid plan, makespan {preport.makespan}")
            continue
        if len(prefix) > len(plan):
            plan = prefix
        if bad is not None:
            lines.extend(f"{where}: step {bad}: {v.describe()}" for v in preport.steps[bad - 1].violations)
        elif preport.makespan is None:
            lines.append(f"{where}: plan does not reach all goals")
        else:
            lines.append(f"{where}: makespan {preport.makespan} exceeds limit {limit}")
    final = check_plan(inst, plan)
    lines.append(
        f"replayed plan: {len(plan) - 1} steps, valid={final.valid}, at goals={final.reaches_goals}"
        + (f", recorded status {recorded_status}" if recorded_status else "")
    )
    return Replay(lines, plan, recorded_plan, recorded_status)


# -- running ----------------------------------------------------------------


def make_backend(bcfg: dict, inst: Instance, limiter: RateLimiter | None = None):
    kind = bcfg["kind"]
    if kind == "oracle":
        return OracleAgent(inst.map, planner_attempts=bcfg.get("planner_attempts", 20))
    if kind == "scripted":
        responses = list(bcfg.get("responses", []))
        if "responses_file" in bcfg:
            responses.extend(json.loads(Path(bcfg["responses_file"]).read_text()))
        if bcfg.get("cycle", False):
            return CyclingBackend(responses)
        return ScriptedBackend(responses)
    if kind == "http":
        if "base_url" not in bcfg:
            raise ValueError("http backend needs 'base_url'")
        return HttpChatBackend(
            bcfg["base_url"],
            timeout=bcfg.get("timeout", 120.0),
            max_retries=bcfg.get("max_retries", 4),
            limiter=limiter,
        )
    raise ValueError(f"unknown backend kind {kind!r}")


def _run_cell(cfg: SuiteConfig, sink: ResultSink, cell: tuple, limiter: RateLimiter | None) -> dict:
    scenario, n, variant, repeat, rid = cell
    inst = load_benchmark_instance(cfg.data_dir, cfg.map_name, scenario, n, cfg.scen_kind)
    loop_cfg = cfg.loop_config(variant)
    backend = make_backend(cfg.backend, inst, limiter)
    result = solve(inst, loop_cfg, backend)
    save_transcript(sink.transcript_path(rid), inst, variant, result, loop_cfg.makespan_multiplier)
    record = {
        "run_id": rid,
        "map": cfg.map_name,
        "scenario": scenario,
        "scen_kind": cfg.scen_kind,
        "n": n,
        "variant": variant.label,
        "variant_fields": _variant_dict(variant),
        "backend": cfg.backend["kind"],
        "model_id": loop_cfg.model_id,
        "seed": loop_cfg.seed,
        "repeat": repeat,
        "result": result.to_record(),
        "failure": None if result.success else classify_failure(result, cfg.oscillation_k),
    }
    sink.append(record)
    log.info("%s: %s", rid, result.status)
    return record


def run_suite(cfg: SuiteConfig) -> SuiteReport:
    """Run every (scenario, n, variant, repeat) cell not already on disk, then aggregate."""
    map_file = Path(cfg.data_dir) / f"{cfg.map_name}.map"
    if not map_file.exists():
        raise FileNotFoundError(f"{map_file} not found; run the 'fetch' subcommand first")
    sink = ResultSink(cfg.output_dir)
    done = sink.completed()
    seed = cfg.loop.get("seed", 42)
    cells = []
    for variant in cfg.variants:
        for n in cfg.agent_counts:
            for scenario in cfg.scenarios:
                for repeat in range(cfg.repeats):
                    rid = run_id(cfg.map_name, scenario, n, variant, cfg.backend["kind"], seed, repeat)
                    if rid not in done:
                        cells.append((scenario, n, variant, repeat, rid))
    log.info("%d cells to run, %d already done", len(cells), len(done))
    limiter = RateLimiter(cfg.backend.get("requests_per_minute")) if cfg.backend["kind"] == "http" else None
    if cfg.parallelism > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            list(pool.map(lambda c: _run_cell(cfg, sink, c, limiter), cells))
    else:
        for c in cells:
            _run_cell(cfg, sink, c, limiter)
    return aggregate(read_records(cfg.output_dir))


# -- aggregation ------------------------------------------------------------


@dataclass
class CellStats:
    map: str
    n: int
    variant: str
    runs: int
    successes: int
    success_rate: float
    avg_iterations_per_step: float | None
    avg_makespan_ratio: float | None
    avg_tokens_per_agent_step: float | None
    restarts: int
    failures: dict[str, int]


@dataclass
class SuiteReport:
    cells: list[CellStats]
    token_growth: dict[int, float | None]

    def cell(self, map_name: str, n: int, variant: str) -> CellStats:
        for c in self.cells:
            if (c.map, c.n, c.variant) == (map_name, n, variant):
                return c
        raise KeyError((map_name, n, variant))


def tokens_per_agent_step(r: RunResult) -> float | None:
    steps = r.steps_taken
    n = len(r.plan_so_far[0]) if r.plan_so_far else 0
    if steps <= 0 or n == 0:
        return None
    return r.total_tokens / (n * steps)


def token_growth_series(results: Iterable[tuple[int, RunResult]]) -> dict[int, float | None]:
    """Mean tokens per agent-step over successful runs, keyed by agent count.

    Agent counts with runs but no successes map to None.
    """
    by_n: dict[int, list[float]] = defaultdict(list)
    for n, r in results:
        by_n.setdefault(n, [])
        if r.success:
            v = tokens_per_agent_step(r)
            if v is not None:
                by_n[n].append(v)
    return {n: (mean(vals) if vals else None) for n, vals in sorted(by_n.items())}


def _mean_or_none(values: list[float]) -> float | None:
    return mean(values) if values else None


def aggregate(records: list[dict]) -> SuiteReport:
    records = sorted(records, key=lambda r: r["run_id"])
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for rec in records:
        groups[(rec["map"], rec["n"], rec["variant"])].append(rec)
    cells = []
    for (map_name, n, variant), recs in sorted(groups.items()):
        results = [RunResult.from_record(r["result"]) for r in recs]
        wins = [r for r in results if r.success]
        failures = Counter({k: 0 for k in FAILURE_KINDS})
        failures.update(r["failure"] for r in recs if r["failure"])
        cells.append(
            CellStats(
                map=map_name,
                n=n,
                variant=variant,
                runs=len(results),
                successes=len(wins),
                success_rate=100.0 * len(wins) / len(results),
                avg_iterations_per_step=_mean_or_none(
                    [mean(r.iterations_per_step) for r in wins if r.iterations_per_step]
                ),
                avg_makespan_ratio=_mean_or_none([r.makespan_ratio for r in wins if r.makespan_ratio is not None]),
                avg_tokens_per_agent_step=_mean_or_none(
                    [v for r in wins if (v := tokens_per_agent_step(r)) is not None]
                ),
                restarts=sum(r.restarts for r in results),
                failures=dict(failures),
            )
        )
    growth = token_growth_series((rec["n"], RunResult.from_record(rec["result"])) for rec in records)
    return SuiteReport(cells, growth)


def _fmt(v: float | None, digits: int = 2) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


def _table(title: str, report: SuiteReport, metric) -> str:
    variants = sorted({c.variant for c in report.cells})
    rows_keys = sorted({(c.map, c.n) for c in report.cells})
    header = ["map", "n", *variants]
    body = []
    for map_name, n in rows_keys:
        row = [map_name, str(n)]
        for v in variants:
            try:
                row.append(metric(report.cell(map_name, n, v)))
            except KeyError:
                row.append("")
        body.append(row)
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = [title, "  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(cell.ljust(w) for cell, w in zip(r, widths)) for r in body)
    return "\n".join(line.rstrip() for line in lines)


def render_report(report: SuiteReport) -> str:
    parts = [
        _table("Success rate (%)", report, lambda c: _fmt(c.success_rate, 0)),
        _table("Avg iterations per step (successes)", report, lambda c: _fmt(c.avg_iterations_per_step)),
        _table("Avg makespan ratio (successes)", report, lambda c: _fmt(c.avg_makespan_ratio)),
        _table("Avg tokens per agent-step (successes)", report, lambda c: _fmt(c.avg_tokens_per_agent_step, 1)),
        _table(
            "Failures (oscillation/long_detour/iteration_limit/backend)",
            report,
            lambda c: "/".join(str(c.failures.get(k, 0)) for k in FAILURE_KINDS),
        ),
    ]
    growth = ["Token growth (avg tokens per agent-step on successes)", "n  tokens"]
    growth += [f"{n}  {_fmt(v, 1)}" for n, v in report.token_growth.items()]
    return "\n\n".join(parts + ["\n".join(growth)]) + "\n"


def report_csv(report: SuiteReport) -> str:
    buf = io.StringIO()
    fields = [f for f in CellStats.__dataclass_fields__ if f != "failures"] + [f"fail_{k}" for k in FAILURE_KINDS]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for c in report.cells:
        d = asdict(c)
        fails = d.pop("failures")
        row = ["" if d[f] is None else d[f] for f in fields[: len(d)]]
        w.writerow(row + [fails.get(k, 0) for k in FAILURE_KINDS])
    return buf.getvalue()


def token_growth_csv(series: dict[int, float | None]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "avg_tokens_per_agent_step"])
    for n, v in series.items():
        w.writerow([n, "" if v is None else f"{v:.4f}"])
    return buf.getvalue()


def write_report(out_dir: str | Path) -> SuiteReport:
    records = read_records(out_dir)
    if not records:
        raise FileNotFoundError(f"no results found in {out_dir}")
    report = aggregate(records)
    out = Path(out_dir)
    (out / "report.txt").write_text(render_report(report))
    (out / "report.csv").write_text(report_csv(report))
    (out / "token_growth.csv").write_text(token_growth_csv(report.token_growth))
    return report
