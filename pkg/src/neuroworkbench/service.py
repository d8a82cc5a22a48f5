"""HTTP wrapper around the same generate / run / eval operations as the CLI.

Serve with any ASGI server, e.g. ``uvicorn neuroworkbench.service:app``.
Requests run synchronously; long suites belong on the command line.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .agents import Topology
from .backends.base import DEFAULT_PRICES, ConfigError, load_price_table
from .benchmark.dataset import FormatError, load_dataset, save_dataset
from .benchmark.phantom import SpecError
from .benchmark.suite import PROFILES, generate_suite, mean_plan_lengths
from .harness import RunConfig, evaluate_traces, run_suite, write_reports


class GenerateRequest(BaseModel):
    out: str
    profile: str = "default"
    seed: int = 0
    write_volumes: bool = True


class TierSummary(BaseModel):
    tier: int
    items: int
    mean_plan_lengths: dict[str, float]


class GenerateResponse(BaseModel):
    items: int
    cases: int
    tiers: list[TierSummary]


class RunRequest(BaseModel):
    dataset: str
    out: str
    topologies: list[str] = Field(default_factory=lambda: [t.value for t in Topology])
    backend: str = "scripted"
    model: str | None = None
    budget: int | None = None
    noise: float = 0.0
    parallel: int = 1
    delay_seconds: float = 0.0
    endpoint: str = ""
    prices: str | None = None  # price-table text


class RunResponse(BaseModel):
    completed: int
    skipped: int
    failed: list[dict]
    exit_code: int


class EvalRequest(BaseModel):
    dataset: str
    out: str
    prices: str | None = None


class EvalResponse(BaseModel):
    runs: int
    errors: list[dict]
    rows: list[dict]
    exit_code: int


def _prices(text: str | None) -> dict:
    return load_price_table(text) if text else dict(DEFAULT_PRICES)


app = FastAPI(title="neuroworkbench")


@app.get("/health")
def health():
    return {"status": "ok", "profiles": sorted(PROFILES)}


@app.post("/generate", response_model=GenerateResponse)
def generate(req: GenerateRequest):
    if req.profile not in PROFILES:
        raise HTTPException(422, f"unknown profile {req.profile!r}")
    try:
        ds = generate_suite(req.profile, req.seed)
        save_dataset(ds, req.out, write_volumes=req.write_volumes)
    except (SpecError, OSError) as exc:
        raise HTTPException(400, str(exc)) from None
    tiers = [TierSummary(tier=t, items=len(ds.by_tier(t)), mean_plan_lengths=mean_plan_lengths(ds.by_tier(t)))
             for t in (1, 2, 3) if ds.by_tier(t)]
    return GenerateResponse(items=len(ds.items), cases=len(ds.cases), tiers=tiers)


@app.post("/run", response_model=RunResponse)
def run(req: RunRequest):
    backend, model = req.backend, req.model
    if backend.startswith("remote:"):
        backend, model = "remote", backend.split(":", 1)[1]
    try:
        kw = {"budget": req.budget} if req.budget is not None else {}
        cfg = RunConfig(
            dataset=Path(req.dataset), out=Path(req.out),
            topologies=tuple(dict.fromkeys(Topology.parse(t) for t in req.topologies)),
            backend=backend, model=model, noise=req.noise, parallel=req.parallel,
            delay_seconds=req.delay_seconds, prices=_prices(req.prices), endpoint=req.endpoint, **kw,
        )
        ds = load_dataset(cfg.dataset)
        summary = run_suite(cfg, dataset=ds)
    except (ConfigError, FormatError, ValueError) as exc:
        raise HTTPException(422, str(exc)) from None
    except OSError as exc:
        raise HTTPException(400, str(exc)) from None
    write_reports(cfg.out, evaluate_traces(cfg.out, ds, cfg.prices))
    return RunResponse(
        completed=len(summary.completed), skipped=len(summary.skipped),
        failed=[{"item_id": i, "topology": t, "error": e} for i, t, e in summary.failed],
        exit_code=summary.exit_code,
    )


@app.post("/eval", response_model=EvalResponse)
def evaluate(req: EvalRequest):
    try:
        ds = load_dataset(req.dataset)
        outcome = evaluate_traces(Path(req.out), ds, _prices(req.prices))
    except (ConfigError, FormatError) as exc:
        raise HTTPException(422, str(exc)) from None
    except OSError as exc:
        raise HTTPException(400, str(exc)) from None
    if not outcome.reports and not outcome.errors:
        raise HTTPException(404, "no runs found")
    write_reports(Path(req.out), outcome)
    return EvalResponse(runs=len(outcome.reports), errors=outcome.errors,
                        rows=[r.row() for r in outcome.reports], exit_code=outcome.exit_code)
