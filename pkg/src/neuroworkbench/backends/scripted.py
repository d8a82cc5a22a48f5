"""Plan steps and the scripted backend that replays them.

A plan cannot know run-specific handle ids, so steps carry *expressions* for
anything computed at run time.  An expression is a literal, a list of
expressions, or a one-key dict naming an operator:

``{"$ref": [step_id, key, ...]}``
    walk into the recorded result of an earlier step (tool observation or
    sub-agent response document).
``{"$sub": [a, b]}``, ``{"$pct": [a, b]}``
    ``b - a`` and ``100 * (b - a) / a``.
``{"$len": expr}``
    length of a list.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

from .base import DecisionContext, Final, Handoff, Subagent, ToolCalls, ToolInvocation

STEP_KINDS = ("ToolCall", "Handoff", "SubagentRequest", "SubagentResponse", "FinalAnswer")


@dataclass
class PlanStep:
    kind: str
    agent: str
    name: str = ""  # tool name, or target agent for Handoff/SubagentRequest
    args: dict = field(default_factory=dict)  # matched by fidelity scoring
    inputs: dict = field(default_factory=dict)  # run-time arguments, not matched
    id: str = ""
    task: str = ""
    expected: list = field(default_factory=list)  # request expected_outputs
    outputs: dict = field(default_factory=dict)  # response / answer field expressions

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown plan step kind {self.kind!r}")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind, "agent": self.agent}
        for key in ("name", "args", "inputs", "id", "task", "expected", "outputs"):
            value = getattr(self, key)
            if value:
                d[key] = value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlanStep":
        return cls(
            kind=d["kind"], agent=d["agent"], name=d.get("name", ""), args=dict(d.get("args", {})),
            inputs=dict(d.get("inputs", {})), id=d.get("id", ""), task=d.get("task", ""),
            expected=list(d.get("expected", [])), outputs=dict(d.get("outputs", {})),
        )


class PlanError(ValueError):
    pass


def evaluate(expr: Any, results: dict[str, Any]) -> Any:
    if isinstance(expr, list):
        return [evaluate(e, results) for e in expr]
    if not isinstance(expr, dict):
        return expr
    if len(expr) != 1 or not next(iter(expr)).startswith("$"):
        return {k: evaluate(v, results) for k, v in expr.items()}
    (op, arg), = expr.items()
    if op == "$ref":
        step, *path = arg
        if step not in results:
            raise PlanError(f"step {step!r} has no recorded result")
        value = results[step]
        for key in path:
            value = value[key]
        return value
    if op == "$sub":
        a, b = evaluate(arg, results)
        return b - a
    if op == "$pct":
        a, b = evaluate(arg, results)
        return 100.0 * (b - a) / a if a else math.nan
    if op == "$len":
        return len(evaluate(arg, results))
    raise PlanError(f"unknown operator {op!r}")


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if value.is_integer():
            return str(int(value))
        return f"{value:.6g}" if abs(value) >= 1e-3 else repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value) if value else "none"
    return str(value)


def answer_text(values: dict[str, Any]) -> str:
    """One ``field: value`` line per field, in the given order."""
    return "\n".join(f"{k}: {format_value(v)}" for k, v in values.items())


def response_document(outputs: dict[str, Any], summary: str = "done") -> str:
    return json.dumps({"status": "done", "outputs": outputs, "summary": summary}, sort_keys=True)


class ScriptedBackend:
    """Replays one expected plan; each agent advances its own cursor over its own steps.

    Episode-local: build a fresh instance per episode.
    """

    name = "scripted"

    def __init__(self, plan: list[PlanStep]):
        self.plan = list(plan)
        self._cursor: dict[str, int] = {}
        self._pending: dict[str, str] = {}  # agent -> step id awaiting its observation
        self.results: dict[str, Any] = {}

    def _steps(self, agent: str) -> list[PlanStep]:
        return [s for s in self.plan if s.agent == agent]

    def _record(self, agent: str, messages: list[dict]) -> None:
        step_id = self._pending.pop(agent, None)
        if step_id is None:
            return
        for msg in reversed(messages):
            if msg.get("role") == "tool":
                self.results[step_id] = json.loads(msg["content"])
                return
        raise PlanError(f"no observation for step {step_id!r}")

    def decide(self, ctx: DecisionContext):
        agent = ctx.agent.name
        self._record(agent, ctx.messages)
        steps = self._steps(agent)
        k = self._cursor.get(agent, 0)
        if k >= len(steps):
            return Final("")
        step = steps[k]
        self._cursor[agent] = k + 1
        if step.kind == "ToolCall":
            args = {**step.args, **evaluate(step.inputs, self.results)}
            if step.id:
                self._pending[agent] = step.id
            return ToolCalls((ToolInvocation(step.name, args),))
        if step.kind == "Handoff":
            return Handoff(step.name)
        if step.kind == "SubagentRequest":
            if step.id:
                self._pending[agent] = step.id
            request = {"task": step.task, "inputs": evaluate(step.inputs, self.results),
                       "expected_outputs": list(step.expected)}
            return Subagent(step.name, request)
        values = {k: evaluate(v, self.results) for k, v in step.outputs.items()}
        if step.kind == "SubagentResponse":
            return Final(response_document(values))
        return Final(answer_text(values))
