"""Command line entry point: ``llm-mapf <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

import yaml

from . import bench_io
from .grid import Coord, Instance
from .search import (
    PlanningError,
    format_plan,
    joint_optimal,
    makespan_lower_bound,
    parse_plan,
    prioritized_plan_with_restarts,
)
from .validator import check_plan

log = logging.getLogger("llm_mapf")

BUILTIN_PREFIX = "builtin:"


def load_instance_yaml(text: str, base: Path | None = None) -> Instance:
    """Instance file: ``map`` (rows, top first) or ``map_file``, plus ``agents``."""
    raw = yaml.safe_load(text)
    name = raw.get("name", "")
    if "map_file" in raw:
        path = Path(raw["map_file"])
        if base is not None and not path.is_absolute():
            path = base / path
        m = bench_io.load_map(path)
    else:
        rows = [r for r in str(raw["map"]).split("\n") if r.strip()]
        m = bench_io.parse_map(
            f"type octile\nheight {len(rows)}\nwidth {len(rows[0])}\nmap\n" + "\n".join(rows) + "\n", name=name
        )
    agents = raw["agents"]
    return Instance(m, tuple(Coord(*a["start"]) for a in agents), tuple(Coord(*a["goal"]) for a in agents))


def _load_instance(args) -> Instance:
    if args.instance:
        if args.instance.startswith(BUILTIN_PREFIX):
            name = args.instance[len(BUILTIN_PREFIX) :]
            ref = resources.files("llm_mapf").joinpath(f"assets/{name}.yaml")
            if not ref.is_file():
                raise FileNotFoundError(f"no built-in instance {name!r}")
            return load_instance_yaml(ref.read_text())
        path = Path(args.instance)
        return load_instance_yaml(path.read_text(), base=path.parent)
    if not (args.map and args.scen and args.agents):
        raise ValueError("give --instance, or all of --map, --scen and --agents")
    m = bench_io.load_map(args.map)
    return bench_io.make_instance(bench_io.load_scen(args.scen, m), args.agents, m)


def _add_instance_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--instance", help="instance YAML file, or builtin:symmetry")
    p.add_argument("--map", help="MovingAI .map file")
    p.add_argument("--scen", help="MovingAI .scen file")
    p.add_argument("--agents", type=int, help="number of agents taken from the scenario")


def cmd_fetch(args) -> int:
    written = bench_io.fetch_benchmarks(args.dest, source=args.source, scen_kind=args.kind)
    print(f"wrote {len(written)} files to {args.dest}")
    return 0


def cmd_run(args) -> int:
    from .experiment import load_suite_config, render_report, run_suite

    cfg = load_suite_config(args.config)
    if args.parallel:
        cfg.parallelism = args.parallel
    report = run_suite(cfg)
    print(render_report(report), end="")
    return 0


def cmd_validate(args) -> int:
    inst = _load_instance(args)
    steps = parse_plan(Path(args.plan).read_text())
    if len(steps[0]) != inst.n:
        print(f"plan has {len(steps[0])} agents, instance has {inst.n}", file=sys.stderr)
        return 2
    try:
        report = check_plan(inst, steps)
    except ValueError as e:
        print(f"invalid plan: {e}", file=sys.stderr)
        return 1
    for t, step_report in enumerate(report.steps, start=1):
        for v in step_report.violations:
            print(f"step {t}: {v.kind}: {v.describe()}")
    if not report.valid:
        print(f"INVALID: first violation at step {report.first_invalid_step}")
        return 1
    if not report.reaches_goals:
        print("INVALID: plan does not end with every agent at its goal")
        return 1
    print(f"VALID makespan {report.makespan}")
    return 0


def cmd_replay(args) -> int:
    from .experiment import replay_transcript

    rep = replay_transcript(args.transcript)
    for line in rep.lines:
        print(line)
    if not rep.consistent:
        print("MISMATCH: replayed plan differs from the recorded plan", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    from .experiment import render_report, write_report

    try:
        report = write_report(args.results)
    except FileNotFoundError as e:
        print(str(e), file=sys.stderr)
        return 1
    print(render_report(report), end="")
    return 0


def cmd_oracle(args) -> int:
    inst = _load_instance(args)
    try:
        plan = prioritized_plan_with_restarts(inst, attempts=args.attempts, seed=args.seed)
    except PlanningError as e:
        print(f"planner failed: {e}", file=sys.stderr)
        return 1
    text = format_plan(plan.steps)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    print(f"makespan {plan.makespan} (lower bound {makespan_lower_bound(inst)})", file=sys.stderr)
    if args.joint:
        try:
            print(f"joint optimum {joint_optimal(inst)}", file=sys.stderr)
        except ValueError as e:
            print(f"joint optimum skipped: {e}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llm-mapf", description="LLM-in-the-loop MAPF harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download benchmark maps and scenarios")
    p.add_argument("--dest", default="data")
    p.add_argument("--source", choices=["pypi", "movingai"], default="pypi")
    p.add_argument("--kind", default="even", help="scenario set (even or random)")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("run", help="run an experiment suite from a YAML config")
    p.add_argument("config")
    p.add_argument("--parallel", type=int, default=0)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a plan file against an instance")
    _add_instance_args(p)
    p.add_argument("--plan", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("replay", help="re-check every step of a run transcript")
    p.add_argument("transcript")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="aggregate persisted results into tables and CSV")
    p.add_argument("results")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("oracle", help="solve an instance with the prioritized planner")
    _add_instance_args(p)
    p.add_argument("--out")
    p.add_argument("--attempts", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--joint", action="store_true", help="also compute the exact joint optimum")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
