import json

import pytest

from conftest import DATA_DIR
from llm_mapf.backend import CyclingBackend, OracleAgent
from llm_mapf.experiment import (
    BACKEND,
    ITERATION_LIMIT,
    LONG_DETOUR,
    OSCILLATION,
    SuiteConfig,
    aggregate,
    cell_entries,
    classify_failure,
    load_suite_config,
    read_records,
    render_report,
    replay_transcript,
    run_id,
    run_suite,
    save_transcript,
    token_growth_csv,
    token_growth_series,
    write_report,
)
from llm_mapf.grid import Coord, GridMap, Instance
from llm_mapf.loop import FAIL_BACKEND, FAIL_ITERATIONS, FAIL_MAKESPAN, SUCCESS, LoopConfig, RunResult, solve_sbs
from llm_mapf.prompting import PromptVariant, format_config

COLLIDE = "Agent 1: (0,0)\nAgent 2: (0,0)"


def C(*pairs):
    return tuple(Coord(*p) for p in pairs)


def fake_result(status, plan, tokens=0, agents=None):
    steps = len(plan) - 1
    log = [{"step": 1, "prompt_tokens": tokens, "completion_tokens": 0}] if tokens else []
    return RunResult(
        status=status,
        plan_so_far=plan,
        lower_bound=1,
        optimal_reference=1,
        optimal_reference_kind="lower_bound",
        makespan=steps if status == SUCCESS else None,
        makespan_ratio=float(steps) if status == SUCCESS else None,
        iterations_per_step=[1] * steps,
        token_log=log,
    )


def walk(n_agents, steps):
    return [tuple(Coord(t, a) for a in range(n_agents)) for t in range(steps + 1)]


def oracle_suite(tmp_path, **kw):
    base = dict(
        map_name="empty-8-8",
        data_dir=str(DATA_DIR),
        agent_counts=[2, 4, 8],
        output_dir=str(tmp_path / "out"),
    )
    base.update(kw)
    return SuiteConfig(**base)


def test_oracle_suite_all_succeed(tmp_path):
    report = run_suite(oracle_suite(tmp_path))
    assert [(c.n, c.success_rate) for c in report.cells] == [(2, 100.0), (4, 100.0), (8, 100.0)]
    assert all(c.avg_iterations_per_step == 1.0 for c in report.cells)


def test_always_collide_suite(tmp_path):
    cfg = SuiteConfig(
        map_name="room-32-32-4",
        data_dir=str(DATA_DIR),
        agent_counts=[2],
        backend={"kind": "scripted", "responses": [COLLIDE], "cycle": True},
        output_dir=str(tmp_path / "out"),
    )
    report = run_suite(cfg)
    cell = report.cell("room-32-32-4", 2, "SBS-TOM+SSO")
    assert cell.success_rate == 0 and cell.runs == 5
    assert cell.failures[ITERATION_LIMIT] == 5
    assert cell.avg_makespan_ratio is None


def test_suite_is_resumable(tmp_path):
    cfg = oracle_suite(tmp_path, agent_counts=[2])
    run_suite(cfg)
    first = read_records(cfg.output_dir)
    assert len(first) == 5
    run_suite(cfg)
    assert read_records(cfg.output_dir) == first
    # drop one record: only that cell reruns
    path = tmp_path / "out" / "results.jsonl"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    run_suite(cfg)
    again = read_records(cfg.output_dir)
    assert len(again) == 5
    assert sorted(r["run_id"] for r in again) == sorted(r["run_id"] for r in first)


def test_parallel_suite_matches_serial(tmp_path):
    serial = run_suite(oracle_suite(tmp_path / "a", agent_counts=[2, 4]))
    parallel = run_suite(oracle_suite(tmp_path / "b", agent_counts=[2, 4], parallelism=4))
    assert render_report(serial) == render_report(parallel)


def test_missing_data(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_suite(oracle_suite(tmp_path, data_dir=str(tmp_path)))


def test_three_of_five_is_sixty():
    records = []
    for s in range(5):
        status = SUCCESS if s < 3 else FAIL_ITERATIONS
        r = fake_result(status, walk(2, 3))
        records.append(
            {
                "run_id": f"r{s}",
                "map": "m",
                "n": 2,
                "variant": "SBS-TOM+SSO",
                "result": r.to_record(),
                "failure": None if r.success else classify_failure(r),
            }
        )
    cell = aggregate(records).cells[0]
    assert cell.success_rate == 60.0
    assert cell.failures[ITERATION_LIMIT] == 2


def test_success_rate_is_multiple_of_twenty(tmp_path):
    report = run_suite(oracle_suite(tmp_path, agent_counts=[2]))
    assert all(c.success_rate % 20 == 0 for c in report.cells)


def test_classify_simple_kinds():
    assert classify_failure(fake_result(FAIL_ITERATIONS, walk(1, 1))) == ITERATION_LIMIT
    assert classify_failure(fake_result(FAIL_BACKEND, walk(1, 0))) == BACKEND
    with pytest.raises(ValueError):
        classify_failure(fake_result(SUCCESS, walk(1, 1)))


def test_classify_back_and_forth():
    path = [C((2, 3)), C((2, 4))] * 4
    assert classify_failure(fake_result(FAIL_MAKESPAN, path)) == OSCILLATION


def test_waiting_counts_as_one_entry():
    assert cell_entries([Coord(0, 0)] * 6) == {(0, 0): 1}
    path = [C((0, 0))] * 6 + [C((1, 0))]
    assert classify_failure(fake_result(FAIL_MAKESPAN, path)) == LONG_DETOUR


def test_spiral_route_is_long_detour():
    # lower bound 2, bound 6; the spiral never re-enters a cell
    inst = Instance(GridMap.empty(8, 8), C((0, 0)), C((2, 0)))
    spiral = [(0, 1), (0, 2), (1, 2), (2, 2), (3, 2), (3, 1), (3, 0)]
    backend = CyclingBackend([format_config(C(c)) for c in spiral])
    r = solve_sbs(inst, LoopConfig(), backend)
    assert r.status == FAIL_MAKESPAN
    assert r.steps_taken == 7 and r.steps_taken / r.lower_bound == 3.5
    assert classify_failure(r) == LONG_DETOUR


def test_token_growth_examples():
    one = fake_result(SUCCESS, walk(2, 10), tokens=5000)
    assert token_growth_series([(2, one)]) == {2: 250.0}
    a = fake_result(SUCCESS, walk(1, 1), tokens=200)
    b = fake_result(SUCCESS, walk(1, 1), tokens=300)
    assert token_growth_series([(1, a), (1, b)]) == {1: 250.0}
    failed = fake_result(FAIL_ITERATIONS, walk(16, 1), tokens=999)
    series = token_growth_series([(1, a), (16, failed)])
    assert series == {1: 200.0, 16: None}
    assert token_growth_csv(series) == "n,avg_tokens_per_agent_step\n1,200.0000\n16,\n"


def test_report_rerun_is_byte_identical(tmp_path):
    cfg = oracle_suite(tmp_path, agent_counts=[2, 4])
    run_suite(cfg)
    out = tmp_path / "out"
    write_report(out)
    first = {name: (out / name).read_bytes() for name in ("report.txt", "report.csv", "token_growth.csv")}
    write_report(out)
    assert first == {name: (out / name).read_bytes() for name in first}
    assert b"Success rate (%)" in first["report.txt"]


def test_report_on_empty_dir(tmp_path):
    with pytest.raises(FileNotFoundError, match="no results found"):
        write_report(tmp_path)


def test_transcript_replay(tmp_path, symmetry):
    r = solve_sbs(symmetry, LoopConfig(), OracleAgent(symmetry.map))
    path = tmp_path / "t.jsonl"
    save_transcript(path, symmetry, PromptVariant(), r)
    rep = replay_transcript(path)
    assert rep.consistent and rep.plan == r.plan_so_far
    assert rep.lines[-1].startswith("replayed plan: 5 steps, valid=True")


def test_suite_transcripts_replay(tmp_path):
    cfg = oracle_suite(tmp_path, agent_counts=[2], scenarios=[1])
    run_suite(cfg)
    (rec,) = read_records(cfg.output_dir)
    rep = replay_transcript(tmp_path / "out" / "transcripts" / f"{rec['run_id']}.jsonl")
    assert rep.consistent and rep.recorded_status == SUCCESS


def test_run_id_is_deterministic_and_safe():
    rid = run_id("room-32-32-4", 3, 8, PromptVariant(), "oracle", 42, 0)
    assert rid == "room-32-32-4__s3__n8__SBS-TOM_SSO__oracle__seed42__r0"


def test_load_suite_config(tmp_path):
    (tmp_path / "suite.yaml").write_text(
        "map_name: empty-8-8\n"
        "data_dir: data\n"
        "agent_counts: [2]\n"
        "variants:\n  - {map_encoding: too, sso: false}\n"
        "loop: {context_budget_tokens: 5000}\n"
    )
    cfg = load_suite_config(tmp_path / "suite.yaml")
    assert cfg.data_dir == str(tmp_path / "data")
    assert cfg.variants == [PromptVariant("too", False)]
    assert cfg.loop_config(cfg.variants[0]).context_budget_tokens == 5000
    (tmp_path / "bad.yaml").write_text("map_name: x\nbogus: 1\n")
    with pytest.raises(ValueError):
        load_suite_config(tmp_path / "bad.yaml")


def test_averages_exclude_failures():
    win = fake_result(SUCCESS, walk(1, 2), tokens=100)
    loss = fake_result(FAIL_MAKESPAN, walk(1, 9), tokens=9000)
    recs = [
        {"run_id": "a", "map": "m", "n": 1, "variant": "v", "result": win.to_record(), "failure": None},
        {"run_id": "b", "map": "m", "n": 1, "variant": "v", "result": loss.to_record(), "failure": LONG_DETOUR},
    ]
    cell = aggregate(recs).cells[0]
    assert cell.avg_tokens_per_agent_step == 50.0
    assert cell.avg_makespan_ratio == 2.0
    assert json.dumps(aggregate(recs).token_growth) == json.dumps(aggregate(recs[::-1]).token_growth)
