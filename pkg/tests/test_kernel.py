import json

import pytest

from neuroworkbench.agents import (
    DuplicateError,
    Topology,
    UnknownTool,
    ToolRegistry,
    agents_for,
    default_registry,
    entry_agent,
    render_tool_schemas,
)
from neuroworkbench.backends.base import Final, Handoff, Subagent, ToolCalls, ToolInvocation, estimate_tokens
from neuroworkbench.backends.planner import PlannerBackend
from neuroworkbench.backends.scripted import ScriptedBackend
from neuroworkbench.benchmark.phantom import bundle_for
from neuroworkbench.kernel import BUDGET_EXCEEDED, Episode, trace_from_jsonl, trace_to_jsonl
from neuroworkbench.toolbox import TOOL_DESCRIPTORS


class QueueBackend:
    """Pops decisions from a per-agent queue and records every context it sees."""

    name = "queue"

    def __init__(self, script: dict[str, list]):
        self.script = {k: list(v) for k, v in script.items()}
        self.seen: list = []

    def decide(self, ctx):
        self.seen.append((ctx.agent.name, [dict(m) for m in ctx.messages]))
        queue = self.script.get(ctx.agent.name) or []
        return queue.pop(0) if queue else Final("")


def call(name, **args):
    return ToolCalls((ToolInvocation(name, args),))


# -- registry and schemas ---------------------------------------------------------


def test_registry():
    reg = default_registry()
    assert len(reg) == len(TOOL_DESCRIPTORS) == 14
    with pytest.raises(DuplicateError):
        reg.register_tool(TOOL_DESCRIPTORS[0], lambda tb, **a: None)
    partial = ToolRegistry()
    partial.register_tool(TOOL_DESCRIPTORS[0], lambda tb, **a: None)
    with pytest.raises(UnknownTool):
        partial.binding("segment_pathology")


def test_schemas():
    reg = default_registry()
    orch = agents_for("orchestrator")["orchestrator"]
    doc, est = render_tool_schemas(orch, reg)
    assert doc == orch.instructions and est == estimate_tokens(orch.instructions)
    gen = agents_for("single")["generalist"]
    g_est = render_tool_schemas(gen, reg)[1]
    for name, spec in agents_for("as-tools").items():
        assert g_est > render_tool_schemas(spec, reg)[1], name
    assert render_tool_schemas(gen, reg) == render_tool_schemas(gen, reg)


def test_entry_agents():
    assert [entry_agent(t) for t in Topology] == ["generalist", "analysis", "analysis", "orchestrator"]


# -- episodes ------------------------------------------------------------------------


@pytest.fixture
def glioma(make_case):
    return make_case()


def test_two_action_episode(glioma):
    bundle, gt = glioma
    files = bundle.files[0]
    be = QueueBackend({"generalist": [call("segment_pathology", model="glioma", **files), Final("model: glioma")]})
    res = Episode("q", bundle, "single", be, truth=gt).run()
    assert res.status == "completed" and res.actions == 2
    assert [e.kind for e in res.trace] == ["ToolCall", "FinalAnswer"]
    assert res.trace[0].detail["handles"] == ["obj_1"]  # path inputs issue no handles
    assert res.tokens_in == sum(e.tokens_in for e in res.trace) > 0


def test_budget_one(glioma):
    bundle, gt = glioma
    be = QueueBackend({"generalist": [call("segment_pathology", model="glioma", **bundle.files[0]), Final("x")]})
    res = Episode("q", bundle, "single", be, truth=gt, budget=1).run()
    assert res.status == BUDGET_EXCEEDED and res.final_text == BUDGET_EXCEEDED
    assert res.actions == 1


def test_tool_errors(glioma):
    bundle, gt = glioma
    be = QueueBackend({"generalist": [call("list_labels", scope="anatomy"), call("list_lables", scope="anatomy"),
                                      call("localize", mask="obj_1"), Final("")]})
    res = Episode("q", bundle, "single", be, truth=gt).run()
    kinds = [(e.kind, e.detail.get("error_kind")) for e in res.trace]
    assert kinds == [("ToolCall", None), ("ToolError", "unknown_tool"), ("ToolError", "bad_argument"),
                     ("FinalAnswer", None)]
    assert res.trace[0].tokens_out > 0


def test_handoffs(glioma):
    bundle, gt = glioma
    be = QueueBackend({
        "analysis": [Handoff("segmentation"), Final("done")],
        "segmentation": [call("verify_registration", image=bundle.files[0]["t1"], reference="atlas:SRI24"),
                         Handoff("segmentation"), Handoff("surgery"), Handoff("analysis")],
    })
    ep = Episode("question text", bundle, "handoffs", be, truth=gt)
    res = ep.run()
    kinds = [e.kind for e in res.trace]
    assert kinds.count("Handoff") == 3 and "SubagentRequest" not in kinds
    assert kinds.count("ToolError") == 1  # unknown agent
    # the segmentation agent sees the full pre-handoff transcript
    first_seg = next(msgs for agent, msgs in be.seen if agent == "segmentation")
    first_ana = be.seen[0][1]
    assert first_seg[: len(first_ana)] == first_ana


def test_subagent_isolation_and_validation(glioma):
    bundle, gt = glioma
    files = bundle.files[0]
    req = {"task": "segment glioma", "inputs": files, "expected_outputs": ["mask_tp0"]}
    be = QueueBackend({
        "analysis": [Subagent("segmentation", req), Subagent("segmentation", req), Final("ok")],
        "segmentation": [
            call("segment_pathology", model="glioma", **files),
            Final(json.dumps({"status": "done", "outputs": {"mask_tp0": "obj_1"}, "summary": "ok"})),
            Final(json.dumps({"status": "done", "outputs": {}, "summary": "oops"})),
        ],
    })
    res = Episode("SECRET QUESTION", bundle, "as-tools", be, truth=gt).run()
    responses = [e.detail["response"] for e in res.trace if e.kind == "SubagentResponse"]
    assert responses[0]["status"] == "done"
    assert responses[1]["status"] == "failed" and responses[1]["summary"].startswith("validation")
    for agent, msgs in be.seen:
        if agent == "segmentation":
            assert all("SECRET QUESTION" not in json.dumps(m) for m in msgs)


def test_delegation_rules(glioma):
    bundle, gt = glioma
    req = {"task": "x"}
    be = QueueBackend({"analysis": [Subagent("analysis", req), Handoff("segmentation"), Subagent("segmentation", {"bad": 1}),
                                    Final("")]})
    res = Episode("q", bundle, "as-tools", be, truth=gt).run()
    errs = [e.detail["error_kind"] for e in res.trace if e.kind == "ToolError"]
    assert errs == ["delegation_target", "handoff_unavailable", "bad_request"]


def test_orchestrator_noop_preprocessing(glioma):
    bundle, gt = glioma
    q = "What segmentation model applies to this glioma case? Report the following fields: model."
    res = Episode(q, bundle, "orchestrator", PlannerBackend(), truth=gt).run()
    pre = [e for e in res.trace if e.kind == "SubagentResponse" and e.agent == "preprocessing"]
    assert pre and pre[0].detail["response"]["status"] == "done" and pre[0].detail["response"]["outputs"] == {}


def test_termination_for_looping_backend(glioma):
    bundle, gt = glioma

    class Loop:
        name = "loop"

        def decide(self, ctx):
            return Handoff("segmentation") if ctx.agent.name == "analysis" else Handoff("analysis")

    for budget in (1, 5, 17):
        res = Episode("q", bundle, "handoffs", Loop(), truth=gt, budget=budget).run()
        assert res.actions <= budget and res.status == BUDGET_EXCEEDED


def test_replay_deterministic_and_jsonl_round_trip(tiny_suite):
    ds, root = tiny_suite
    for item in ds.items:
        for topo in Topology:
            traces = []
            for _ in range(2):
                res = Episode(item.question, bundle_for(ds.cases[item.case], root), topo,
                              ScriptedBackend(item.plan(topo))).run()
                traces.append(trace_to_jsonl(res.trace))
            assert traces[0] == traces[1]
            assert trace_to_jsonl(trace_from_jsonl(traces[0])) == traces[0]
