"""Suite runner and trace evaluation shared by the CLI and the HTTP service."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .agents import Topology
from .backends.base import DEFAULT_PRICES, Backend, ConfigError, PriceTable
from .backends.planner import PlannerBackend
from .backends.remote import RateLimiter, RemoteBackend, RemoteConfig
from .backends.scripted import ScriptedBackend
from .benchmark.dataset import load_dataset
from .benchmark.phantom import bundle_for, generate_phantom
from .benchmark.suite import BenchmarkItem, Dataset
from .evaluation import RunReport, aggregate, evaluate_run
from .kernel import DEFAULT_BUDGET, Episode, TraceEvent, trace_to_jsonl

log = logging.getLogger(__name__)

TRACE_DIR = "traces"


@dataclass
class RunConfig:
    dataset: Path
    out: Path
    topologies: tuple[Topology, ...] = tuple(Topology)
    backend: str = "scripted"  # scripted | planner | remote
    model: str | None = None
    budget: int = DEFAULT_BUDGET
    noise: float = 0.0
    parallel: int = 1
    delay_seconds: float = 0.0
    prices: PriceTable = field(default_factory=lambda: dict(DEFAULT_PRICES))
    endpoint: str = ""
    requests_per_minute: float | None = None

    def __post_init__(self):
        if self.delay_seconds < 0:
            raise ConfigError("delay must be >= 0")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")
        if self.budget < 1:
            raise ConfigError("budget must be >= 1")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError("noise must be within [0, 1]")

    @property
    def backend_label(self) -> str:
        return f"remote:{self.model}" if self.backend == "remote" else self.backend

    @property
    def price_model(self) -> str:
        return self.model if self.backend == "remote" else self.backend


@dataclass
class RunSummary:
    completed: list[tuple[str, str]] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    failed: list[tuple[str, str, str]] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        if not self.failed:
            return 0
        return 1 if not (self.completed or self.skipped) else 2


def trace_path(out: Path, topology: str, item_id: str) -> Path:
    return Path(out) / TRACE_DIR / topology / f"{item_id}.jsonl"


def write_atomic(path: Path, text: str) -> None:
    """Write via a temp file and rename, so a present file is always complete (the resume marker)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp_", suffix=path.suffix)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def run_record(item: BenchmarkItem, topology: str, backend: str, model: str, result) -> str:
    header = {
        "record": "run",
        "item_id": item.item_id,
        "topology": topology,
        "backend": backend,
        "model": model,
        "status": result.status,
        "final_text": result.final_text,
        "usage": {"prompt_tokens": result.usage.prompt_tokens, "completion_tokens": result.usage.completion_tokens},
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n" + trace_to_jsonl(result.trace)


def read_run(path: Path) -> tuple[dict, list[TraceEvent]]:
    lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
    if not lines:
        raise ValueError(f"{path}: empty trace file")
    header = json.loads(lines[0])
    if header.get("record") != "run":
        raise ValueError(f"{path}: first line is not a run record")
    return header, [TraceEvent.from_dict(json.loads(l)) for l in lines[1:]]


def ensure_volumes(ds: Dataset, root: Path) -> None:
    for spec in ds.cases.values():
        bundle = bundle_for(spec, root)
        if not all(bundle.resolve(p).exists() for p in bundle.all_paths()):
            generate_phantom(spec, root)


def run_suite(cfg: RunConfig, *, dataset: Dataset | None = None,
              backend_factory: Callable[[BenchmarkItem, Topology], Backend] | None = None,
              sleep=None, clock=None) -> RunSummary:
    """Run every (item, topology) pair without a completed trace; items are independent."""
    ds = dataset if dataset is not None else load_dataset(cfg.dataset)
    root = Path(cfg.dataset) if Path(cfg.dataset).is_dir() else Path(cfg.dataset).parent
    ensure_volumes(ds, root)
    if backend_factory is None:
        backend_factory = default_backend_factory(cfg)
    summary = RunSummary()
    todo = []
    for item in sorted(ds.items, key=lambda i: i.item_id):
        for topo in cfg.topologies:
            if trace_path(cfg.out, topo.value, item.item_id).exists():
                summary.skipped.append((item.item_id, topo.value))
            else:
                todo.append((item, topo))
    limiter_kw = {}
    if sleep is not None:
        limiter_kw["sleep"] = sleep
    if clock is not None:
        limiter_kw["clock"] = clock
    gate = RateLimiter(60.0 / cfg.delay_seconds if cfg.delay_seconds > 0 else None, **limiter_kw)

    def work(job):
        item, topo = job
        gate.acquire()
        try:
            spec = ds.cases[item.case]
            backend = backend_factory(item, topo)
            episode = Episode(item.question, bundle_for(spec, root), topo, backend,
                              budget=cfg.budget, noise=cfg.noise)
            result = episode.run()
        except Exception as exc:  # one bad item must not stop the suite
            log.error("run %s/%s failed: %s", item.item_id, topo.value, exc)
            return job, None, str(exc)
        text = run_record(item, topo.value, cfg.backend_label, cfg.price_model or cfg.backend, result)
        write_atomic(trace_path(cfg.out, topo.value, item.item_id), text)
        return job, result, None

    if cfg.parallel == 1:
        outcomes = [work(j) for j in todo]
    else:
        with ThreadPoolExecutor(max_workers=cfg.parallel) as pool:
            outcomes = list(pool.map(work, todo))
    for (item, topo), result, err in outcomes:
        if err is None:
            summary.completed.append((item.item_id, topo.value))
        else:
            summary.failed.append((item.item_id, topo.value, err))
    return summary


def default_backend_factory(cfg: RunConfig) -> Callable[[BenchmarkItem, Topology], Backend]:
    if cfg.backend == "scripted":
        def scripted(item, topo):
            plan = item.plan(topo)
            if plan is None:
                raise ConfigError(f"item {item.item_id} has no plan for {topo.value}")
            return ScriptedBackend(plan)
        return scripted
    if cfg.backend == "planner":
        return lambda item, topo: PlannerBackend()
    if cfg.backend == "remote":
        if not cfg.model:
            raise ConfigError("remote backend needs --model")
        rc = RemoteConfig.from_env(cfg.endpoint, cfg.model, requests_per_minute=cfg.requests_per_minute)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        shared = RemoteBackend(rc, record_path=Path(cfg.out) / "remote_transcripts.jsonl")
        return lambda item, topo: shared
    raise ConfigError(f"unknown backend {cfg.backend!r}")


@dataclass
class EvalOutcome:
    reports: list[RunReport]
    errors: list[dict]

    @property
    def exit_code(self) -> int:
        if not self.reports and not self.errors:
            return 1
        return 2 if self.errors else 0


def evaluate_traces(out: Path, ds: Dataset, prices: PriceTable) -> EvalOutcome:
    items = {i.item_id: i for i in ds.items}
    reports, errors = [], []
    for path in sorted((Path(out) / TRACE_DIR).glob("*/*.jsonl")):
        try:
            header, trace = read_run(path)
        except (ValueError, json.JSONDecodeError) as exc:
            errors.append({"trace": str(path), "error": str(exc)})
            continue
        item = items.get(header["item_id"])
        if item is None:
            errors.append({"item_id": header["item_id"], "topology": header.get("topology"),
                           "error": "item not in dataset"})
            continue
        usage = header.get("usage") or {}
        try:
            reports.append(evaluate_run(
                trace, header.get("final_text", ""), item, header["topology"], prices,
                header.get("model") or header["backend"], backend=header["backend"],
                status=header.get("status", "completed"),
                usage=(usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)),
            ))
        except ConfigError as exc:
            errors.append({"item_id": item.item_id, "topology": header["topology"], "error": str(exc)})
    return EvalOutcome(reports, errors)


def write_reports(out: Path, outcome: EvalOutcome) -> dict[str, Path]:
    out = Path(out)
    rows = sorted(outcome.reports, key=lambda r: (r.item_id, r.topology, r.backend))
    runs = "".join(json.dumps(r.row(), sort_keys=True) + "\n" for r in rows)
    runs += "".join(json.dumps({"error": True, **e}, sort_keys=True) + "\n" for e in outcome.errors)
    verdicts = "".join(json.dumps({
        "item_id": r.item_id, "topology": r.topology, "backend": r.backend,
        "fields": [{"name": f.name, "included": f.included, "correct": f.correct, "reported": f.reported}
                   for f in r.verdict.fields],
    }, sort_keys=True) + "\n" for r in rows)
    paths = {"runs": out / "metrics.jsonl", "verdicts": out / "verdicts.jsonl"}
    write_atomic(paths["runs"], runs)
    write_atomic(paths["verdicts"], verdicts)
    if rows:
        table = aggregate(rows)
        paths["csv"] = out / "report.csv"
        paths["text"] = out / "report.txt"
        write_atomic(paths["csv"], table.to_csv())
        write_atomic(paths["text"], table.to_text())
    return paths
