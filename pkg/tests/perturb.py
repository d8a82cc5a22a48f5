"""Trace and plan perturbations with closed-form effects on the metrics."""

from __future__ import annotations

import copy
from dataclasses import replace

from neuroworkbench.backends.scripted import PlanStep
from neuroworkbench.kernel import TraceEvent


def _renumber(trace: list[TraceEvent]) -> list[TraceEvent]:
    return [replace(e, seq=i) for i, e in enumerate(trace, 1)]


def with_extra_call(trace: list[TraceEvent]) -> list[TraceEvent]:
    """Insert one benign tool call (list_labels on lobes) just before the final answer."""
    final = max(i for i, e in enumerate(trace) if e.kind == "FinalAnswer")
    extra = TraceEvent(0, trace[final].agent, "ToolCall",
                       {"tool": "list_labels", "args": {"scope": "lobes"}, "handles": []})
    return _renumber(trace[:final] + [extra] + trace[final:])


def without_step(trace: list[TraceEvent], kind: str = "ToolCall") -> list[TraceEvent]:
    """Drop the first non-synthetic event of ``kind``."""
    idx = next(i for i, e in enumerate(trace) if e.kind == kind and not e.synthetic)
    return _renumber(trace[:idx] + trace[idx + 1:])


def with_wrong_model(plan: list[PlanStep], model: str) -> list[PlanStep]:
    """Swap the model of the first segment_pathology step."""
    plan = copy.deepcopy(plan)
    step = next(s for s in plan if s.kind == "ToolCall" and s.name == "segment_pathology")
    step.inputs["model"] = model
    return plan


def plan_actions(plan: list[PlanStep]) -> int:
    """Matchable steps: everything except the final answer."""
    return sum(1 for s in plan if s.kind != "FinalAnswer")
