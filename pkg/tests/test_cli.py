import json

import pytest

from neuroworkbench.agents import Topology
from neuroworkbench.backends.base import ConfigError
from neuroworkbench.backends.scripted import ScriptedBackend
from neuroworkbench.benchmark.dataset import DATASET_FILE, load_dataset
from neuroworkbench.cli import build_parser, main, parse_config, resolve
from neuroworkbench.harness import (
    RunConfig,
    evaluate_traces,
    read_run,
    run_record,
    run_suite,
    trace_path,
    write_atomic,
)

from perturb import with_extra_call


@pytest.fixture(scope="module")
def tiny_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    assert main(["generate", "--profile", "tiny", "--out", str(out)]) == 0
    return out


def test_generate_tiny(tiny_dir, capsys, tmp_path):
    lines = (tiny_dir / DATASET_FILE).read_text().splitlines()
    assert len(lines) == 4  # header plus three items
    assert main(["generate", "--profile", "tiny", "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.startswith("3 items")
    for name in (DATASET_FILE, "cases.jsonl"):
        assert (tmp_path / name).read_bytes() == (tiny_dir / name).read_bytes()


def test_config_merge(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# run settings\nbudget = 7\nnoise = 0.25\ntopology = single, orchestrator\n"
                   "[prices]\nmy-model = 10, 20\n")
    args = resolve(build_parser().parse_args(["run", "--config", str(cfg), "--budget", "3"]))
    assert args.budget == 3 and args.noise == 0.25 and args.topology == ["single", "orchestrator"]
    assert args.price_table["my-model"] == (10.0, 20.0)
    args = resolve(build_parser().parse_args(["run", "--backend", "remote:gpt-x"]))
    assert (args.backend, args.model) == ("remote", "gpt-x")
    with pytest.raises(ConfigError):
        parse_config("colour = blue")
    with pytest.raises(ConfigError):
        parse_config("budget = lots")


def test_run_eval_and_resume(tiny_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--dataset", str(tiny_dir), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "12 completed, 0 skipped" in text
    assert (out / "report.csv").exists() and len((out / "metrics.jsonl").read_text().splitlines()) == 12
    assert main(["run", "--dataset", str(tiny_dir), "--out", str(out)]) == 0
    assert "0 completed, 12 skipped" in capsys.readouterr().out
    assert main(["eval", "--dataset", str(tiny_dir), "--out", str(out)]) == 0
    rows = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert all(r["precision"] == r["recall"] == r["accuracy"] == 1.0 for r in rows)


def test_eval_empty_and_bad_input(tiny_dir, tmp_path, capsys):
    assert main(["eval", "--dataset", str(tiny_dir), "--out", str(tmp_path)]) == 1
    assert "no runs found" in capsys.readouterr().err
    assert main(["run", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 1
    assert main(["run", "--dataset", str(tiny_dir), "--out", str(tmp_path), "--topology", "mesh"]) == 1
    assert main(["run", "--dataset", str(tiny_dir), "--out", str(tmp_path), "--budget", "0"]) == 1


def test_corrupt_trace_gives_partial(tiny_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--dataset", str(tiny_dir), "--out", str(out), "--topology", "single"]) == 0
    ds = load_dataset(tiny_dir)
    write_atomic(trace_path(out, "single", ds.items[0].item_id), "{not json\n")
    assert main(["eval", "--dataset", str(tiny_dir), "--out", str(out)]) == 2


def test_budget_one_status(tiny_dir, tmp_path):
    out = tmp_path / "b1"
    assert main(["run", "--dataset", str(tiny_dir), "--out", str(out), "--backend", "planner", "--budget", "1",
                 "--topology", "orchestrator"]) == 0
    paths = list((out / "traces" / "orchestrator").glob("*.jsonl"))
    assert len(paths) == 3
    for path in paths:
        header, trace = read_run(path)
        assert header["status"] == "budget_exceeded"
        assert sum(e.is_action for e in trace if not e.synthetic) <= 1


def test_delay_gates_episode_starts(tiny_dir, tmp_path):
    now, starts = [0.0], []

    def sleep(s):
        now[0] += s

    def factory(item, topo):
        starts.append(now[0])
        return ScriptedBackend(item.plan(topo))

    cfg = RunConfig(tiny_dir, tmp_path, delay_seconds=2.5)
    summary = run_suite(cfg, backend_factory=factory, sleep=sleep, clock=lambda: now[0])
    assert len(summary.completed) == 12
    gaps = [b - a for a, b in zip(starts, starts[1:])]
    assert all(g >= 2.5 - 1e-9 for g in gaps)


def test_parallel_matches_serial(tiny_dir, tmp_path):
    for n in (1, 3):
        run_suite(RunConfig(tiny_dir, tmp_path / str(n), parallel=n))
    for p in (tmp_path / "1").rglob("*.jsonl"):
        assert p.read_bytes() == (tmp_path / "3" / p.relative_to(tmp_path / "1")).read_bytes()


def test_perturbed_trace_degrades_row(tiny_dir, tmp_path):
    ds = load_dataset(tiny_dir)
    run_suite(RunConfig(tiny_dir, tmp_path, topologies=(Topology.SINGLE,)))
    item = ds.items[0]
    path = trace_path(tmp_path, "single", item.item_id)
    header, trace = read_run(path)

    class Result:
        status = header["status"]
        final_text = header["final_text"]
        usage = type("U", (), {"prompt_tokens": 0, "completion_tokens": 0})()

    Result.trace = with_extra_call(trace)
    write_atomic(path, run_record(item, "single", "scripted", "scripted", Result))
    rows = {r.item_id: r for r in evaluate_traces(tmp_path, ds, {"scripted": (0.0, 0.0)}).reports}
    assert rows[item.item_id].precision < 1.0 and rows[item.item_id].recall == 1.0
    assert all(r.precision == 1.0 for k, r in rows.items() if k != item.item_id)
