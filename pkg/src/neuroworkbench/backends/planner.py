"""Rule-based planner: an offline agent for the benchmark's own question grammar.

Stateless between decisions.  Each decision re-runs the active agent's
workflow from the top against the transcript: every tool call or delegation
whose result is already in the transcript returns that result, and the first
one that is not becomes the next decision.
"""

from __future__ import annotations

import json
import re
from typing import Any

from ..atlas import MODALITIES, PATHOLOGY_MODELS
from ..benchmark.templates import (
    ANATOMY_FIELDS, FEATURE_FIELDS, LESION_RE, TUMOR_T1_FIELDS, TemplateError, atlas_target, fields_from_question,
    pathology_from_text, requirements,
)
from .base import DecisionContext, Final, Handoff, Subagent, ToolCalls, ToolInvocation
from .scripted import answer_text, response_document

ABSTAIN = "cannot find"
_FILE_LINE = re.compile(r"^- tp(\d+) (\w+): (\S+)$")

# Task texts are shared with the expected plans only by convention; they are not matched.
PRE_TASK = "Skull-strip and register the listed scans to the atlas; return one image handle per input key."
PRE_NOOP_TASK = "Check whether the scans need preprocessing; the inputs list nothing to prepare."
SEG_TASK = "Verify the prerequisites and segment at every listed timepoint."
ANALYSIS_TASK = "Measure the segmented lesions and report every expected output field."


class _Next(Exception):
    def __init__(self, decision):
        self.decision = decision


class _GiveUp(Exception):
    pass


def _canon(args: dict) -> str:
    return json.dumps(args, sort_keys=True, separators=(",", ":"))


class _Transcript:
    """Executed tool calls and delegations, in order, with their observations."""

    def __init__(self, messages: list[dict]):
        self.calls: list[tuple[str, str, dict]] = []
        self.delegations: list[tuple[str, str, dict]] = []
        for i, msg in enumerate(messages[:-1]):
            nxt = messages[i + 1]
            if msg.get("role") != "assistant" or nxt.get("role") != "tool":
                continue
            try:
                obs = json.loads(nxt["content"])
            except (KeyError, json.JSONDecodeError):
                continue
            if "tool_calls" in msg and len(msg["tool_calls"]) == 1:
                call = msg["tool_calls"][0]
                self.calls.append((call["name"], _canon(call.get("args", {})), obs))
            elif "delegate" in msg:
                self.delegations.append((msg["delegate"], msg["request"].get("task", ""), obs))
        self._used_calls: set[int] = set()
        self._used_dels: set[int] = set()

    def call(self, name: str, **args) -> dict:
        key = _canon(args)
        for i, (n, a, obs) in enumerate(self.calls):
            if i not in self._used_calls and n == name and a == key:
                self._used_calls.add(i)
                if obs.get("status") != "ok":
                    raise _GiveUp(obs)
                return obs["payload"]
        raise _Next(ToolCalls((ToolInvocation(name, args),)))

    def find(self, name: str, **args) -> dict | None:
        key = _canon(args)
        for n, a, obs in self.calls:
            if n == name and a == key and obs.get("status") == "ok":
                return obs["payload"]
        return None

    def ran(self, name: str) -> bool:
        return any(n == name for n, _, _ in self.calls)

    def delegate(self, target: str, task: str, inputs: dict, expected: list[str]) -> dict:
        for i, (t, tk, obs) in enumerate(self.delegations):
            if i not in self._used_dels and t == target and tk == task:
                self._used_dels.add(i)
                if obs.get("status") != "done":
                    raise _GiveUp(obs)
                return obs.get("outputs", {})
        raise _Next(Subagent(target, {"task": task, "inputs": inputs, "expected_outputs": expected}))


class _Question:
    def __init__(self, text: str):
        lines = text.splitlines()
        self.question = lines[0] if lines else ""
        self.fields = fields_from_question(self.question)
        self.pathology = pathology_from_text(self.question)
        self.files: dict[tuple[int, str], str] = {}
        for line in lines[1:]:
            m = _FILE_LINE.match(line.strip())
            if m:
                self.files[(int(m.group(1)), m.group(2))] = m.group(3)
        self.native = any("_native" in p for p in self.files.values())
        try:
            self.req = requirements(self.fields)
        except TemplateError:
            self.req = None

    @property
    def tumor(self) -> bool:
        return self.req is not None and self.req.kind == "tumor"

    @property
    def needs_pre(self) -> bool:
        return self.tumor and self.native


# ---------------------------------------------------------------------------
# Workflow stages
# ---------------------------------------------------------------------------


def _preprocess(tx: _Transcript, files: dict[tuple[int, str], str], tps, target: str, lookup=False) -> dict:
    images = {}
    for tp in tps:
        for m in MODALITIES:
            if lookup:
                a = tx.find("skull_strip", image=files[(tp, m)])
                b = a and tx.find("register", image=a["image"], target=target)
                if not b:
                    raise _GiveUp("preprocessing results missing")
            else:
                a = tx.call("skull_strip", image=files[(tp, m)])
                b = tx.call("register", image=a["image"], target=target)
            images[(tp, m)] = b["image"]
    return images


def _segment(tx: _Transcript, images: dict, tps, model: str, verify: bool, lookup=False) -> dict[int, dict]:
    target = atlas_target(model)
    out = {}
    for tp in tps:
        if verify and not lookup:
            tx.call("verify_registration", image=images[(tp, "t1")], reference=target)
        args = {m: images[(tp, m)] for m in MODALITIES}
        args["model"] = model
        payload = tx.find("segment_pathology", **args) if lookup else tx.call("segment_pathology", **args)
        if payload is None:
            raise _GiveUp("segmentation results missing")
        out[tp] = payload
    return out


def _seg_fields(segs: dict[int, dict]) -> dict[str, Any]:
    return {"model": segs[0]["model"], "segmentation_file": segs[0]["output_file"]} if 0 in segs else {}


def _anatomy_fields(payload: dict) -> dict[str, Any]:
    return {"anatomy_file": payload["output_files"][0], "volume_table_file": payload["output_files"][1]}


def _analyse(tx: _Transcript, fields: list[str], masks: dict[int, str], flair) -> dict[str, Any]:
    req = requirements(fields)
    values: dict[str, Any] = {}
    enum = {tp: tx.call("enumerate_lesions", mask=masks[tp]) for tp in req.enumerate_tps}
    for tp, e in enum.items():
        values[f"lesion_count_t{tp}"] = e["lesion_count"]
        values[f"total_volume_t{tp}_mm3"] = e["total_volume_mm3"]
    if 0 in enum:
        values["lesion_count"] = enum[0]["lesion_count"]
        values["total_lesion_volume_mm3"] = enum[0]["total_volume_mm3"]
        lesions = enum[0]["lesions"]
        for name in fields:
            m = LESION_RE.match(name)
            if not m:
                continue
            i, what = int(m.group(1)), m.group(2)
            if i > len(lesions):
                values[name] = ABSTAIN
            elif what == "volume_mm3":
                values[name] = lesions[i - 1]["volume_mm3"]
            elif what.startswith("centroid_"):
                values[name] = lesions[i - 1]["centroid_mm"]["xyz".index(what[9])]
        count = len(lesions)
        for i in req.localize:
            if i <= count:
                values[f"lesion_{i}_lobe"] = tx.call("localize", mask=masks[0], lesion_id=i)["lobe"]
        for i in req.features:
            if i <= count:
                feats = tx.call("lesion_features", mask=masks[0], image=flair, lesion_id=i)["features"]
                for f in FEATURE_FIELDS:
                    values[f"lesion_{i}_{f}"] = feats[f]
    matches = {}
    for a, b in req.pairs:
        matches[(a, b)] = tx.call("match_lesions", mask_t0=masks[a], mask_t1=masks[b])
        values[f"new_lesions_t{a}_t{b}"] = len(matches[(a, b)]["new"])
        values[f"resolved_lesions_t{a}_t{b}"] = len(matches[(a, b)]["resolved"])
    for a, b in req.lobe_pairs:
        lobes = [tx.call("localize", mask=masks[b], lesion_id=i)["lobe"] for i in matches[(a, b)]["new"]]
        values[f"new_lesion_lobes_t{a}_t{b}"] = sorted(set(lobes))
    for name in fields:
        if name.startswith("volume_change_"):
            parts = name.split("_")
            a, b = (int(p[1:]) for p in parts[2:4])
            va, vb = values[f"total_volume_t{a}_mm3"], values[f"total_volume_t{b}_mm3"]
            values[name] = vb - va if parts[4] == "mm3" else (100.0 * (vb - va) / va if va else ABSTAIN)
    return values


def _answer(fields: list[str], values: dict[str, Any]) -> Final:
    return Final(answer_text({f: values.get(f, ABSTAIN) for f in fields}))


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------


class PlannerBackend:
    name = "planner"

    def decide(self, ctx: DecisionContext):
        messages = ctx.messages
        if not messages:
            return Final("")
        first = messages[0].get("content", "")
        request = None
        try:
            doc = json.loads(first)
            if isinstance(doc, dict) and "task" in doc:
                request = doc
        except (json.JSONDecodeError, TypeError):
            pass
        tx = _Transcript(messages)
        agent = ctx.agent.name
        try:
            if request is not None:
                return self._callee(agent, request, tx)
            q = _Question(first)
            if q.req is None:
                return Final("\n".join(f"{f}: {ABSTAIN}" for f in q.fields) or ABSTAIN)
            if ctx.topology == "handoffs":
                return self._handoff_agent(agent, q, tx)
            if agent == "generalist":
                return self._generalist(q, tx)
            if agent == "orchestrator":
                return self._orchestrator(q, tx)
            return self._analysis_lead(q, tx)
        except _Next as nxt:
            return nxt.decision
        except _GiveUp:
            if request is not None:
                return Final(json.dumps({"status": "failed", "outputs": {}, "summary": "a tool call failed"}))
            return Final("\n".join(f"{f}: {ABSTAIN}" for f in fields_from_question(first)) or ABSTAIN)

    # single ------------------------------------------------------------------

    def _generalist(self, q: _Question, tx: _Transcript) -> Final:
        if not q.tumor:
            return _answer(q.fields, _anatomy_fields(tx.call("segment_anatomy", image=q.files[(0, "t1")])))
        model = q.pathology or "glioma"
        images = dict(q.files)
        if q.needs_pre:
            images.update(_preprocess(tx, q.files, q.req.seg_tps, atlas_target(model)))
        segs = _segment(tx, images, q.req.seg_tps, model, verify=False)
        values = _seg_fields(segs)
        if q.req.analysis:
            masks = {tp: s["mask"] for tp, s in segs.items()}
            values.update(_analyse(tx, q.fields, masks, images[(0, "flair")]))
        return _answer(q.fields, values)

    # requests ------------------------------------------------------------------

    @staticmethod
    def _pre_request(q: _Question, model: str) -> tuple[str, dict, list[str]]:
        if not q.needs_pre:
            return PRE_NOOP_TASK, {}, []
        keys = {f"tp{tp}_{m}": q.files[(tp, m)] for tp in q.req.seg_tps for m in MODALITIES}
        return PRE_TASK, {"atlas": atlas_target(model), **keys}, list(keys)

    @staticmethod
    def _seg_request(q: _Question, model: str, images: dict) -> tuple[str, dict, list[str]]:
        if not q.tumor:
            return SEG_TASK, {"model": "anatomy", "tp0_t1": q.files[(0, "t1")]}, ["mask_tp0", *ANATOMY_FIELDS]
        inputs = {"model": model, "atlas": atlas_target(model)}
        for tp in q.req.seg_tps:
            for m in MODALITIES:
                inputs[f"tp{tp}_{m}"] = images[(tp, m)]
        expected = [f"mask_tp{tp}" for tp in q.req.seg_tps] + [k for k in TUMOR_T1_FIELDS if k in q.fields]
        return SEG_TASK, inputs, expected

    @staticmethod
    def _images_from(outputs: dict, base: dict) -> dict:
        images = dict(base)
        for key, handle in outputs.items():
            m = re.fullmatch(r"tp(\d+)_(\w+)", key)
            if m:
                images[(int(m.group(1)), m.group(2))] = handle
        return images

    # agents-as-tools lead ------------------------------------------------------

    def _analysis_lead(self, q: _Question, tx: _Transcript) -> Final:
        model = q.pathology or "glioma"
        images = dict(q.files)
        if q.needs_pre:
            images = self._images_from(tx.delegate("preprocessing", *self._pre_request(q, model)), images)
        seg = tx.delegate("segmentation", *self._seg_request(q, model, images))
        if not q.req.analysis:
            return _answer(q.fields, seg)
        masks = {tp: seg[f"mask_tp{tp}"] for tp in q.req.seg_tps}
        values = {k: v for k, v in seg.items() if k in q.fields}
        values.update(_analyse(tx, q.fields, masks, images[(0, "flair")]))
        return _answer(q.fields, values)

    # orchestrator ----------------------------------------------------------------

    def _orchestrator(self, q: _Question, tx: _Transcript) -> Final:
        model = q.pathology or "glioma"
        pre = tx.delegate("preprocessing", *self._pre_request(q, model))
        images = self._images_from(pre, q.files)
        seg = tx.delegate("segmentation", *self._seg_request(q, model, images))
        if not q.req.analysis:
            return _answer(q.fields, seg)
        inputs = {f"mask_tp{tp}": seg[f"mask_tp{tp}"] for tp in q.req.seg_tps}
        inputs["flair_tp0"] = images[(0, "flair")]
        out = tx.delegate("analysis", ANALYSIS_TASK, inputs, list(q.fields))
        return _answer(q.fields, out)

    # callees -----------------------------------------------------------------------

    def _callee(self, agent: str, request: dict, tx: _Transcript) -> Final:
        inputs = request.get("inputs", {}) or {}
        expected = list(request.get("expected_outputs", []) or [])
        keyed = {}
        for key, value in inputs.items():
            m = re.fullmatch(r"tp(\d+)_(\w+)", key)
            if m:
                keyed[(int(m.group(1)), m.group(2))] = value
        tps = sorted({tp for tp, _ in keyed})
        if agent == "preprocessing":
            if not keyed:
                return Final(response_document({}, "nothing to preprocess"))
            target = inputs.get("atlas", "atlas:SRI24")
            images = _preprocess(tx, keyed, tps, target)
            return Final(response_document({f"tp{tp}_{m}": h for (tp, m), h in images.items()}))
        if agent == "segmentation":
            model = inputs.get("model")
            if model == "anatomy":
                payload = tx.call("segment_anatomy", image=keyed[(0, "t1")])
                return Final(response_document({"mask_tp0": payload["mask"], **_anatomy_fields(payload)}))
            if model not in PATHOLOGY_MODELS:
                raise _GiveUp(f"unknown model {model!r}")
            segs = _segment(tx, keyed, tps, model, verify=True)
            out = {f"mask_tp{tp}": s["mask"] for tp, s in segs.items()}
            out.update({k: v for k, v in _seg_fields(segs).items() if k in expected})
            return Final(response_document(out))
        if agent == "analysis":
            masks = {int(k[7:]): v for k, v in inputs.items() if re.fullmatch(r"mask_tp\d+", k)}
            values = _analyse(tx, expected, masks, inputs.get("flair_tp0"))
            return Final(response_document({f: values.get(f, ABSTAIN) for f in expected}))
        raise _GiveUp(f"{agent} does not take requests")

    # handoffs ------------------------------------------------------------------------

    def _handoff_agent(self, agent: str, q: _Question, tx: _Transcript):
        model = q.pathology or "glioma"
        target = atlas_target(model)
        if agent == "preprocessing":
            _preprocess(tx, q.files, q.req.seg_tps, target)
            return Handoff("analysis")
        if agent == "segmentation":
            if not q.tumor:
                tx.call("segment_anatomy", image=q.files[(0, "t1")])
                return Handoff("analysis")
            images = dict(q.files)
            if q.needs_pre:
                images.update(_preprocess(tx, q.files, q.req.seg_tps, target, lookup=True))
            _segment(tx, images, q.req.seg_tps, model, verify=True)
            return Handoff("analysis")
        # analysis leads
        if q.needs_pre and not tx.ran("register"):
            return Handoff("preprocessing")
        if not (tx.ran("segment_pathology") or tx.ran("segment_anatomy")):
            return Handoff("segmentation")
        if not q.tumor:
            payload = tx.find("segment_anatomy", image=q.files[(0, "t1")])
            if payload is None:
                raise _GiveUp("anatomy missing")
            return _answer(q.fields, _anatomy_fields(payload))
        images = dict(q.files)
        if q.needs_pre:
            images.update(_preprocess(tx, q.files, q.req.seg_tps, target, lookup=True))
        segs = _segment(tx, images, q.req.seg_tps, model, verify=False, lookup=True)
        values = _seg_fields(segs)
        if q.req.analysis:
            values.update(_analyse(tx, q.fields, {tp: s["mask"] for tp, s in segs.items()}, images[(0, "flair")]))
        return _answer(q.fields, values)
