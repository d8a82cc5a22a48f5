"""Tool-call fidelity, cost and output-quality metrics, and Table-style aggregation."""

from __future__ import annotations

import csv
import io
import math
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable

from .agents import TOPOLOGIES
from .backends.base import ConfigError, PriceTable, cost_cents
from .backends.scripted import PlanStep
from .benchmark.suite import BenchmarkItem, ExpectedField
from .kernel import TraceEvent, canonical_value

# ---------------------------------------------------------------------------
# Fidelity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionKey:
    kind: str
    name: str
    args: tuple = ()  # sorted (name, canonical value) pairs

    def __str__(self) -> str:
        if not self.args:
            return f"{self.kind}:{self.name}"
        inner = ",".join(f"{k}={v}" for k, v in self.args)
        return f"{self.kind}:{self.name}({inner})"


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    if isinstance(value, dict):
        return tuple((k, _freeze(v)) for k, v in sorted(value.items()))
    return value


def event_key(event: TraceEvent) -> ActionKey | None:
    """Matching key of a trace action; None for FinalAnswer and synthetic events."""
    if not event.is_action or event.kind == "FinalAnswer":
        return None
    d = event.detail
    if event.kind in ("ToolCall", "ToolError"):
        args = d.get("args") or {}
        return ActionKey(event.kind, d.get("tool", ""), tuple((k, _freeze(v)) for k, v in sorted(args.items())))
    if event.kind in ("Handoff", "SubagentRequest"):
        return ActionKey(event.kind, d.get("target", ""))
    return ActionKey(event.kind, event.agent)  # SubagentResponse, keyed by responder


def step_key(step: PlanStep) -> ActionKey | None:
    if step.kind == "FinalAnswer":
        return None
    if step.kind == "SubagentResponse":
        return ActionKey(step.kind, step.agent)
    args = canonical_value(step.args)
    return ActionKey(step.kind, step.name, tuple((k, _freeze(v)) for k, v in sorted(args.items())))


def _matches(expected: ActionKey, predicted: ActionKey) -> bool:
    """Plan-named args must agree; args the plan leaves unnamed are ignored."""
    if expected.kind != predicted.kind or expected.name != predicted.name:
        return False
    got = dict(predicted.args)
    return all(k in got and got[k] == v for k, v in expected.args)


def _max_matching(expected: list[ActionKey], predicted: list[ActionKey]) -> list[tuple[int, int]]:
    """Maximum bipartite matching (augmenting paths); groups are small."""
    adj = [[j for j, p in enumerate(predicted) if _matches(e, p)] for e in expected]
    owner: dict[int, int] = {}

    def augment(i: int, seen: set[int]) -> bool:
        for j in adj[i]:
            if j in seen:
                continue
            seen.add(j)
            if j not in owner or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    for i in range(len(expected)):
        augment(i, set())
    return sorted((i, j) for j, i in owner.items())


@dataclass
class FidelityScore:
    precision: float
    recall: float
    matched: list[str] = field(default_factory=list)
    extra: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)


def plan_fidelity(trace: Iterable[TraceEvent], expected_plan: list[PlanStep]) -> FidelityScore:
    """Order-invariant multiset precision/recall of trace actions against a plan."""
    predicted = [k for k in (event_key(e) for e in trace) if k is not None]
    expected = [k for k in (step_key(s) for s in expected_plan) if k is not None]
    pairs = _max_matching(expected, predicted)
    used_e = {i for i, _ in pairs}
    used_p = {j for _, j in pairs}
    n = len(pairs)
    if predicted:
        precision = n / len(predicted)
    else:
        precision = 1.0 if not expected else 0.0
    recall = n / len(expected) if expected else 1.0
    return FidelityScore(
        precision, recall,
        matched=sorted(str(expected[i]) for i, _ in pairs),
        extra=sorted(str(p) for j, p in enumerate(predicted) if j not in used_p),
        missing=sorted(str(e) for i, e in enumerate(expected) if i not in used_e),
    )


def count_errors(trace: Iterable[TraceEvent]) -> int:
    return sum(1 for e in trace if e.kind == "ToolError")


def count_actions(trace: Iterable[TraceEvent]) -> int:
    return sum(1 for e in trace if e.is_action)


# ---------------------------------------------------------------------------
# Answer judging
# ---------------------------------------------------------------------------

ABSTENTIONS = ("cannot find", "can't find", "could not", "not applicable", "n/a", "unknown", "not available",
               "unable", "not found", "cannot determine")
_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


@dataclass(frozen=True)
class FieldVerdict:
    name: str
    included: bool
    correct: bool
    reported: str | None


@dataclass
class JudgeVerdict:
    fields: list[FieldVerdict]

    @property
    def included(self) -> int:
        return sum(f.included for f in self.fields)

    @property
    def correct(self) -> int:
        return sum(f.correct for f in self.fields)

    @property
    def inclusion_rate(self) -> float:
        return self.included / len(self.fields) if self.fields else 0.0

    @property
    def accuracy(self) -> float:
        return self.correct / len(self.fields) if self.fields else 0.0


def _norm_key(text: str) -> str:
    text = text.strip().strip("-*•` ").strip("*_`\"' ").lower()
    return re.sub(r"[\s_]+", "_", text)


def parse_answer(text: str) -> dict[str, str]:
    """``key: value`` lines (last occurrence wins), keys normalised."""
    out = {}
    for line in text.splitlines():
        if ":" not in line:
            continue
        key, value = line.split(":", 1)
        key = _norm_key(key)
        if key:
            out[key] = value.strip().strip("*` ")
    return out


def _inline(text: str, names: Iterable[str]) -> str | None:
    for name in names:
        pattern = re.escape(name).replace(r"\ ", r"[\s_]+").replace("_", r"[\s_]+")
        m = re.search(rf"\b{pattern}\s+(?:is|was|=|equals)\s+([^\n;]+?)(?:[.;]\s|[.;]?$|\n)", text, re.I | re.M)
        if m:
            return m.group(1).strip()
    return None


def _is_abstention(value: str) -> bool:
    v = value.lower()
    return any(a in v for a in ABSTENTIONS)


def _set_items(value: str) -> set[str]:
    v = value.strip().strip("[]{}")
    if v.lower() in ("", "none", "empty", "no new lesions"):
        return set()
    parts = re.split(r"[,;]|\band\b", v)
    return {p.strip().strip("'\"").lower() for p in parts if p.strip()}


def compare_value(reported: str, expected: ExpectedField) -> bool:
    c = expected.comparison
    if c.kind == "numeric":
        m = _NUMBER.search(reported)
        if not m:
            return False
        x = float(m.group())
        e = float(expected.value)
        if math.isnan(e):
            return math.isnan(x)
        return abs(x - e) <= max(c.abs_tol, c.rel_tol * abs(e))
    if c.kind == "set":
        want = {str(v).lower() for v in (expected.value or [])}
        return _set_items(reported) == want
    return reported.strip().strip("'\".").lower() == str(expected.value).strip().lower()


def judge_answer(answer: str, expected: list[ExpectedField]) -> JudgeVerdict:
    """Deterministic key-value judge; abstentions count as included but wrong."""
    parsed = parse_answer(answer or "")
    verdicts = []
    for f in expected:
        names = [f.field, *f.aliases]
        reported = None
        for n in names:
            if _norm_key(n) in parsed:
                reported = parsed[_norm_key(n)]
                break
        if reported is None:
            reported = _inline(answer or "", names)
        if reported is None:
            verdicts.append(FieldVerdict(f.field, False, False, None))
            continue
        correct = not _is_abstention(reported) and compare_value(reported, f)
        verdicts.append(FieldVerdict(f.field, True, correct, reported))
    return JudgeVerdict(verdicts)


# ---------------------------------------------------------------------------
# Runs and aggregation
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    item_id: str
    tier: int
    topology: str
    backend: str
    status: str
    errors: int
    precision: float
    recall: float
    actions: int
    tokens_in: int
    tokens_out: int
    cost_cents: float
    inclusion_rate: float
    accuracy: float
    fidelity: FidelityScore | None = None
    verdict: JudgeVerdict | None = None

    def row(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("fidelity")
        d.pop("verdict")
        return d


def evaluate_run(trace: list[TraceEvent], final_text: str, item: BenchmarkItem, topology: str,
                 prices: PriceTable, model: str, backend: str | None = None, status: str = "completed",
                 usage: tuple[int, int] | None = None) -> RunReport:
    plan = item.plan(topology)
    if plan is None:
        raise ConfigError(f"item {item.item_id} has no plan for topology {topology!r}")
    fid = plan_fidelity(trace, plan)
    t_in = sum(e.tokens_in for e in trace)
    t_out = sum(e.tokens_out for e in trace)
    if usage and any(usage):  # vendor-reported counts are preferred when present
        t_in, t_out = usage
    verdict = judge_answer(final_text, item.expected_answer)
    return RunReport(
        item.item_id, item.tier, topology, backend or model, status, count_errors(trace), fid.precision,
        fid.recall, count_actions(trace), t_in, t_out, cost_cents(t_in, t_out, model, prices),
        verdict.inclusion_rate, verdict.accuracy, fid, verdict,
    )


COLUMNS = (
    ("Errors", "errors"), ("Prec.", "precision"), ("Rec.", "recall"), ("Actions", "actions"),
    ("Tokens In", "tokens_in"), ("Out", "tokens_out"), ("Cost", "cost_cents"),
    ("Incl.", "inclusion_rate"), ("Acc.", "accuracy"),
)


@dataclass
class ReportTable:
    rows: list[dict[str, Any]]  # tier, topology, backend, runs, then COLUMNS attrs

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Tier", "Topology", "Backend", "Runs", *(c for c, _ in COLUMNS)])
        for r in self.rows:
            w.writerow([r["tier"], r["topology"], r["backend"], r["runs"], *(_fmt(r[a]) for _, a in COLUMNS)])
        return buf.getvalue()

    def to_text(self) -> str:
        header = ["Tier", "Topology", "Backend", "Runs", *(c for c, _ in COLUMNS)]
        body = [[str(r["tier"]), r["topology"], r["backend"], str(r["runs"]), *(_fmt(r[a]) for _, a in COLUMNS)]
                for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        lines = ["  ".join(h.ljust(w) if i < 3 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
        for row in body:
            lines.append("  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
        return "\n".join(lines) + "\n"


def _fmt(value: float) -> str:
    return f"{value:.4f}" if isinstance(value, float) else str(value)


def aggregate(reports: list[RunReport]) -> ReportTable:
    """Per-(tier, topology, backend) means, folded in item-id order."""
    if not reports:
        raise ValueError("no runs to aggregate")
    groups: dict[tuple, list[RunReport]] = defaultdict(list)
    for r in sorted(reports, key=lambda r: (r.item_id, r.topology, r.backend)):
        groups[(r.tier, r.topology, r.backend)].append(r)
    order = {t.value: i for i, t in enumerate(TOPOLOGIES)}
    rows = []
    for (tier, topo, backend) in sorted(groups, key=lambda g: (g[0], order.get(g[1], 99), g[1], g[2])):
        runs = groups[(tier, topo, backend)]
        row: dict[str, Any] = {"tier": tier, "topology": topo, "backend": backend, "runs": len(runs)}
        for _, attr in COLUMNS:
            row[attr] = float(sum(getattr(r, attr) for r in runs) / len(runs))
        rows.append(row)
    return ReportTable(rows)
