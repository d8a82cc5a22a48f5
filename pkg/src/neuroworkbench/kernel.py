"""Episode loop: asks a backend for decisions and executes them under a topology.

Action accounting: ToolCall, ToolError, Handoff, SubagentRequest,
SubagentResponse and FinalAnswer events each count as one action, except
events the kernel synthesises itself (budget exhaustion), which are flagged
``synthetic`` and never counted.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any

from pydantic import ValidationError

from .agents import (
    AgentSpec,
    InterAgentRequest,
    InterAgentResponse,
    Topology,
    ToolRegistry,
    agents_for,
    default_registry,
    entry_agent,
    render_tool_schemas,
)
from .backends.base import (
    Backend,
    Decision,
    DecisionContext,
    Final,
    Handoff,
    Subagent,
    ToolCalls,
    ToolInvocation,
    Usage,
    estimate_tokens,
    serialize_decision,
)
from .benchmark.phantom import CaseBundle, GroundTruth, ground_truth
from .toolbox import HandleStore, Toolbox, ToolResult, observation_text

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 40
BUDGET_EXCEEDED = "budget_exceeded"

EVENT_KINDS = ("ToolCall", "ToolError", "Handoff", "SubagentRequest", "SubagentResponse", "FinalAnswer")
ACTION_KINDS = frozenset(EVENT_KINDS)


@dataclass
class TraceEvent:
    seq: int
    agent: str
    kind: str
    detail: dict
    tokens_in: int = 0
    tokens_out: int = 0
    synthetic: bool = False

    @property
    def is_action(self) -> bool:
        return self.kind in ACTION_KINDS and not self.synthetic

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TraceEvent":
        return cls(**{k: d[k] for k in ("seq", "agent", "kind", "detail")},
                   tokens_in=d.get("tokens_in", 0), tokens_out=d.get("tokens_out", 0),
                   synthetic=d.get("synthetic", False))


@dataclass
class ConversationState:
    messages: list[dict]
    active_agent: str
    handles: HandleStore
    budget: int = DEFAULT_BUDGET


@dataclass
class EpisodeResult:
    final_text: str
    trace: list[TraceEvent]
    status: str  # completed | budget_exceeded
    usage: Usage = field(default_factory=Usage)

    @property
    def actions(self) -> int:
        return sum(1 for e in self.trace if e.is_action)

    @property
    def tokens_in(self) -> int:
        return sum(e.tokens_in for e in self.trace)

    @property
    def tokens_out(self) -> int:
        return sum(e.tokens_out for e in self.trace)


# ---------------------------------------------------------------------------
# Canonical argument rendering
# ---------------------------------------------------------------------------


def canonical_value(value: Any) -> Any:
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        return int(value) if value.is_integer() else value
    if isinstance(value, dict):
        return {str(k): canonical_value(v) for k, v in sorted(value.items())}
    if isinstance(value, (list, tuple)):
        return [canonical_value(v) for v in value]
    return str(value)


def canonical_args(args: dict) -> dict:
    """Sorted keys, integral floats rendered as ints, everything else verbatim."""
    return canonical_value(dict(args))


def canonical_json(value: Any) -> str:
    return json.dumps(canonical_value(value), sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Episode
# ---------------------------------------------------------------------------


def case_prompt(question: str, case: CaseBundle) -> str:
    lines = [question, "", f"Case {case.case_id} files:"]
    for tp, per_mod in enumerate(case.files):
        for modality, path in per_mod.items():
            lines.append(f"- tp{tp} {modality}: {path}")
    return "\n".join(lines)


class Episode:
    """One question on one case under one topology; not thread-safe, one worker per episode."""

    def __init__(
        self,
        question: str,
        case: CaseBundle,
        topology: Topology | str,
        backend: Backend,
        *,
        truth: GroundTruth | None = None,
        budget: int = DEFAULT_BUDGET,
        registry: ToolRegistry | None = None,
        noise: float = 0.0,
        output_dir=None,
        toolbox: Toolbox | None = None,
    ):
        if budget < 1:
            raise ValueError("budget must be >= 1")
        self.question = question
        self.case = case
        self.topology = Topology.parse(topology)
        self.backend = backend
        self.registry = registry or default_registry()
        self.agents = agents_for(self.topology)
        self.budget = budget
        self.store = HandleStore()
        if toolbox is None:
            truth = truth if truth is not None else ground_truth(case.spec)
            toolbox = Toolbox(case, truth, noise=noise, output_dir=output_dir, store=self.store)
        self.toolbox = toolbox
        self.store = toolbox.store
        self.trace: list[TraceEvent] = []
        self.usage = Usage()
        self._schemas = {name: render_tool_schemas(spec, self.registry)[0] for name, spec in self.agents.items()}

    # -- bookkeeping -------------------------------------------------------

    @property
    def actions(self) -> int:
        return sum(1 for e in self.trace if e.is_action)

    def _budget_left(self) -> bool:
        return self.actions < self.budget

    def _log(self, agent: str, kind: str, detail: dict, tokens=(0, 0), synthetic=False) -> TraceEvent:
        event = TraceEvent(len(self.trace) + 1, agent, kind, detail, tokens[0], tokens[1], synthetic)
        self.trace.append(event)
        return event

    def _decide(self, state: ConversationState) -> tuple[Decision, tuple[int, int]]:
        spec = self.agents[state.active_agent]
        ctx = DecisionContext(
            agent=spec,
            topology=self.topology.value,
            messages=state.messages,
            schema=self._schemas[spec.name],
            peers=spec.peers,
            tools=tuple(self.registry.descriptor(t) for t in spec.tools),
        )
        decision = self.backend.decide(ctx)
        usage = getattr(decision, "usage", None) or getattr(self.backend, "last_usage", None)
        if isinstance(usage, Usage):
            self.usage.prompt_tokens += usage.prompt_tokens
            self.usage.completion_tokens += usage.completion_tokens
        return decision, (estimate_tokens(ctx.render()), estimate_tokens(serialize_decision(decision)))

    # -- tool execution ----------------------------------------------------

    def execute_tool_call(self, invocation: ToolInvocation, state: ConversationState, tokens=(0, 0)) -> ToolResult:
        agent = self.agents[state.active_agent]
        name = invocation.name
        args = invocation.args if isinstance(invocation.args, dict) else {}
        detail = {"tool": name, "args": canonical_args(args)}
        if name not in agent.tools or name not in self.registry:
            result = ToolResult.error("unknown_tool", f"{agent.name} has no tool named {name!r}")
        else:
            problem = self._check_args(name, invocation.args)
            if problem:
                result = ToolResult.error("bad_argument", problem)
            else:
                result = self.registry.binding(name)(self.toolbox, **args)
        if result.ok:
            detail["handles"] = [h.id for h in result.handles]
            self._log(agent.name, "ToolCall", detail, tokens)
        else:
            detail["error_kind"] = result.error_kind
            self._log(agent.name, "ToolError", detail, tokens)
        state.messages.append({"role": "assistant", "agent": agent.name,
                               "tool_calls": [{"name": name, "args": detail["args"]}]})
        state.messages.append({"role": "tool", "name": name, "content": observation_text(name, result)})
        return result

    def _check_args(self, name: str, args) -> str | None:
        if not isinstance(args, dict):
            return "arguments must be an object"
        desc = self.registry.descriptor(name)
        known = {p.name for p in desc.params}
        unknown = sorted(set(args) - known)
        if unknown:
            return f"unknown arguments: {', '.join(unknown)}"
        missing = [p.name for p in desc.params if p.required and args.get(p.name) is None]
        if missing:
            return f"missing required arguments: {', '.join(missing)}"
        for p in desc.params:
            if p.choices and p.name in args and args[p.name] not in p.choices:
                return f"{p.name} must be one of {list(p.choices)}"
        return None

    # -- handoffs and delegation -------------------------------------------

    def perform_handoff(self, state: ConversationState, target: str, tokens=(0, 0)) -> ConversationState:
        current = self.agents[state.active_agent]
        if target not in self.agents or (target != current.name and target not in current.peers):
            self._log(current.name, "ToolError", {"tool": "handoff", "target": target, "error_kind": "handoff_target"}, tokens)
            state.messages.append({"role": "tool", "name": "handoff",
                                   "content": json.dumps({"status": "error", "error_kind": "handoff_target",
                                                          "target": target})})
            return state
        self._log(current.name, "Handoff", {"target": target}, tokens)
        state.active_agent = target
        return state

    def call_subagent(self, caller: ConversationState, target: str, request: dict, tokens=(0, 0)) -> InterAgentResponse | None:
        """Run ``target`` on ``request`` in a fresh transcript; None when the request was rejected."""
        agent = self.agents[caller.active_agent]
        try:
            req = InterAgentRequest.model_validate(request)
        except ValidationError as exc:
            self._reject(caller, agent.name, "bad_request", f"invalid request: {exc.errors()[0]['msg']}", target, tokens)
            return None
        if target not in self.agents or target not in agent.peers:
            self._reject(caller, agent.name, "delegation_target", f"{agent.name} cannot delegate to {target!r}", target, tokens)
            return None
        req_doc = req.model_dump()
        self._log(agent.name, "SubagentRequest", {"target": target, "request": canonical_value(req_doc)}, tokens)
        caller.messages.append({"role": "assistant", "agent": agent.name,
                                "delegate": target, "request": canonical_value(req_doc)})
        sub = ConversationState(
            messages=[{"role": "user", "content": json.dumps(canonical_value(req_doc), sort_keys=True)}],
            active_agent=target,
            handles=self.store,
            budget=self.budget,
        )
        response = self._run_callee(sub, req)
        caller.messages.append({"role": "tool", "name": f"delegate:{target}",
                                "content": response.model_dump_json()})
        return response

    def _reject(self, state, agent, kind, message, target, tokens):
        self._log(agent, "ToolError", {"tool": "delegate", "target": target, "error_kind": kind}, tokens)
        state.messages.append({"role": "tool", "name": "delegate",
                               "content": json.dumps({"status": "error", "error_kind": kind, "message": message})})

    def _run_callee(self, state: ConversationState, req: InterAgentRequest) -> InterAgentResponse:
        callee = state.active_agent
        while True:
            if not self._budget_left():
                resp = InterAgentResponse(status="failed", outputs={}, summary=BUDGET_EXCEEDED)
                self._log(callee, "SubagentResponse", {"response": resp.model_dump()}, synthetic=True)
                return resp
            decision, tokens = self._decide(state)
            if isinstance(decision, ToolCalls):
                self._run_tool_calls(decision, state, tokens)
            elif isinstance(decision, Final):
                resp = self._validate_response(decision.text, req)
                self._log(callee, "SubagentResponse", {"response": canonical_value(resp.model_dump())}, tokens)
                return resp
            else:
                kind = "nested_delegation" if isinstance(decision, Subagent) else "handoff_unavailable"
                target = decision.target
                self._reject(state, callee, kind, f"{callee} cannot {kind.replace('_', ' ')}", target, tokens)

    @staticmethod
    def _validate_response(text: str, req: InterAgentRequest) -> InterAgentResponse:
        try:
            resp = InterAgentResponse.model_validate_json(text)
        except ValidationError as exc:
            return InterAgentResponse(status="failed", outputs={}, summary=f"validation: {exc.errors()[0]['msg']}")
        missing = [k for k in req.expected_outputs if k not in resp.outputs]
        if resp.status == "done" and missing:
            return InterAgentResponse(status="failed", outputs=resp.outputs,
                                      summary=f"validation: missing outputs {', '.join(missing)}")
        return resp

    def _run_tool_calls(self, decision: ToolCalls, state: ConversationState, tokens) -> None:
        if not decision.calls:
            self._log(state.active_agent, "ToolError", {"tool": "", "error_kind": "bad_decision"}, tokens)
            return
        for i, call in enumerate(decision.calls):
            if not self._budget_left():
                return
            self.execute_tool_call(call, state, tokens if i == 0 else (0, 0))

    # -- main loop ----------------------------------------------------------

    def run(self) -> EpisodeResult:
        entry = entry_agent(self.topology)
        state = ConversationState(
            messages=[{"role": "user", "content": case_prompt(self.question, self.case)}],
            active_agent=entry,
            handles=self.store,
            budget=self.budget,
        )
        while True:
            if not self._budget_left():
                self._log(state.active_agent, "FinalAnswer", {"text": BUDGET_EXCEEDED}, synthetic=True)
                return EpisodeResult(BUDGET_EXCEEDED, self.trace, BUDGET_EXCEEDED, self.usage)
            decision, tokens = self._decide(state)
            if isinstance(decision, Final):
                self._log(state.active_agent, "FinalAnswer", {"text": decision.text}, tokens)
                state.messages.append({"role": "assistant", "agent": state.active_agent, "content": decision.text})
                return EpisodeResult(decision.text, self.trace, "completed", self.usage)
            if isinstance(decision, ToolCalls):
                self._run_tool_calls(decision, state, tokens)
            elif isinstance(decision, Handoff):
                if self.topology is not Topology.HANDOFFS:
                    self._reject(state, state.active_agent, "handoff_unavailable",
                                 f"handoffs are not available in {self.topology.value}", decision.target, tokens)
                else:
                    self.perform_handoff(state, decision.target, tokens)
            elif isinstance(decision, Subagent):
                if self.topology not in (Topology.AGENTS_AS_TOOLS, Topology.ORCHESTRATOR):
                    self._reject(state, state.active_agent, "delegation_unavailable",
                                 f"delegation is not available in {self.topology.value}", decision.target, tokens)
                else:
                    self.call_subagent(state, decision.target, decision.request, tokens)
            else:
                raise TypeError(f"backend returned {decision!r}")


def run_episode(question, case, topology, backend, budget=DEFAULT_BUDGET, **kwargs) -> EpisodeResult:
    return Episode(question, case, topology, backend, budget=budget, **kwargs).run()


def trace_to_jsonl(trace: list[TraceEvent]) -> str:
    return "".join(json.dumps(e.to_dict(), sort_keys=True, separators=(",", ":")) + "\n" for e in trace)


def trace_from_jsonl(text: str) -> list[TraceEvent]:
    return [TraceEvent.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
