"""Expected plans: one workflow skeleton, framed per topology.

The skeleton has three stages (preprocessing, segmentation, analysis).  The
single generalist runs them inline; agents-as-tools and handoffs wrap the
first two in SubagentRequest/Response or Handoff/Handoff pairs; the
orchestrator delegates all three and always consults preprocessing first.
"""

from __future__ import annotations

from ..agents import Topology
from ..atlas import MODALITIES, PATHOLOGY_MODELS
from ..backends.scripted import PlanStep
from .phantom import PhantomSpec, case_paths
from .templates import (
    ANATOMY_FIELDS, ENUM_FIELDS, FEATURE_FIELDS, LESION_RE, TUMOR_T1_FIELDS, Requirements, atlas_target, requirements,
)

GENERALIST = "generalist"
PRE, SEG, ANA, ORCH = "preprocessing", "segmentation", "analysis", "orchestrator"


def ref(step: str, *path) -> dict:
    return {"$ref": [step, *path]}


def pre_needed(spec: PhantomSpec, req: Requirements) -> bool:
    return req.kind == "tumor" and not spec.preprocessed


def pre_task(atlas: str) -> str:
    return f"Skull-strip and register the listed scans to {atlas}; return one image handle per input key."


PRE_NOOP_TASK = "Check whether the scans need preprocessing; the inputs list nothing to prepare."


def seg_task(model: str) -> str:
    if model == "anatomy":
        return "Segment the brain anatomy (SynthSeg) of the listed T1 scan."
    return f"Verify the prerequisites and segment the tumour with model {model} at every listed timepoint."


ANALYSIS_TASK = "Measure the segmented lesions and report every expected output field."


class _Builder:
    def __init__(self, spec: PhantomSpec, fields: list[str], new_ids: dict[tuple[int, int], list[int]]):
        self.spec = spec
        self.fields = list(fields)
        self.req = requirements(fields)
        self.new_ids = new_ids
        self.steps: list[PlanStep] = []
        self.paths = case_paths(spec)
        self.images: dict[tuple[int, str], object] = {
            (tp, m): self.paths[tp][m] for tp in range(spec.timepoints) for m in MODALITIES
        }
        self.masks: dict[int, dict] = {}
        self.field_exprs: dict[str, object] = {}
        self._n = 0

    def add(self, kind: str, agent: str, name: str = "", **kw) -> str:
        self._n += 1
        sid = f"s{self._n}"
        self.steps.append(PlanStep(kind, agent, name, id=sid, **kw))
        return sid

    # -- stages --------------------------------------------------------------

    def preprocess(self, agent: str) -> dict:
        target = atlas_target(self.spec.pathology)
        out = {}
        for tp in self.req.seg_tps:
            for m in MODALITIES:
                s1 = self.add("ToolCall", agent, "skull_strip", inputs={"image": self.paths[tp][m]})
                s2 = self.add("ToolCall", agent, "register", args={"target": target},
                              inputs={"image": ref(s1, "payload", "image")})
                self.images[(tp, m)] = ref(s2, "payload", "image")
                out[f"tp{tp}_{m}"] = self.images[(tp, m)]
        return out

    def segment(self, agent: str, verify: bool) -> dict:
        out = {}
        if self.req.kind == "anatomy":
            s = self.add("ToolCall", agent, "segment_anatomy", inputs={"image": self.paths[0]["t1"]})
            out = {"mask_tp0": ref(s, "payload", "mask"),
                   "anatomy_file": ref(s, "payload", "output_files", 0),
                   "volume_table_file": ref(s, "payload", "output_files", 1)}
            self.field_exprs.update({k: out[k] for k in ANATOMY_FIELDS})
            return out
        target = atlas_target(self.spec.pathology)
        for tp in self.req.seg_tps:
            if verify:
                self.add("ToolCall", agent, "verify_registration", args={"reference": target},
                         inputs={"image": self.images[(tp, "t1")]})
            inputs = {m: self.images[(tp, m)] for m in MODALITIES}
            inputs["model"] = self.spec.pathology
            s = self.add("ToolCall", agent, "segment_pathology", inputs=inputs)
            self.masks[tp] = ref(s, "payload", "mask")
            out[f"mask_tp{tp}"] = self.masks[tp]
            if tp == 0:
                self.field_exprs["model"] = ref(s, "payload", "model")
                self.field_exprs["segmentation_file"] = ref(s, "payload", "output_file")
                for k in TUMOR_T1_FIELDS:
                    if k in self.fields:
                        out[k] = self.field_exprs[k]
        return out

    def analyse(self, agent: str, masks: dict[int, object], flair) -> None:
        r = self.req
        fx = self.field_exprs
        enum = {}
        for tp in r.enumerate_tps:
            enum[tp] = self.add("ToolCall", agent, "enumerate_lesions", inputs={"mask": masks[tp]})
            fx[f"lesion_count_t{tp}"] = ref(enum[tp], "payload", "lesion_count")
            fx[f"total_volume_t{tp}_mm3"] = ref(enum[tp], "payload", "total_volume_mm3")
        if 0 in enum:
            fx["lesion_count"] = fx["lesion_count_t0"]
            fx["total_lesion_volume_mm3"] = fx["total_volume_t0_mm3"]
        for name in self.fields:
            m = LESION_RE.match(name)
            if m and m.group(2) in ENUM_FIELDS:
                i, what = int(m.group(1)), m.group(2)
                if what == "volume_mm3":
                    fx[name] = ref(enum[0], "payload", "lesions", i - 1, "volume_mm3")
                else:
                    fx[name] = ref(enum[0], "payload", "lesions", i - 1, "centroid_mm", "xyz".index(what[9]))
        for i in r.localize:
            s = self.add("ToolCall", agent, "localize", args={"lesion_id": i}, inputs={"mask": masks[0]})
            fx[f"lesion_{i}_lobe"] = ref(s, "payload", "lobe")
        for i in r.features:
            s = self.add("ToolCall", agent, "lesion_features", args={"lesion_id": i},
                         inputs={"mask": masks[0], "image": flair})
            for f in FEATURE_FIELDS:
                fx[f"lesion_{i}_{f}"] = ref(s, "payload", "features", f)
        for a, b in r.pairs:
            s = self.add("ToolCall", agent, "match_lesions", inputs={"mask_t0": masks[a], "mask_t1": masks[b]})
            fx[f"new_lesions_t{a}_t{b}"] = {"$len": ref(s, "payload", "new")}
            fx[f"resolved_lesions_t{a}_t{b}"] = {"$len": ref(s, "payload", "resolved")}
        for a, b in r.lobe_pairs:
            lobes = []
            for i in self.new_ids[(a, b)]:
                s = self.add("ToolCall", agent, "localize", args={"lesion_id": i}, inputs={"mask": masks[b]})
                lobes.append(ref(s, "payload", "lobe"))
            fx[f"new_lesion_lobes_t{a}_t{b}"] = lobes
        for name in self.fields:
            if name.startswith("volume_change_"):
                a, b = (int(t[1:]) for t in name.split("_")[2:4])
                op = "$pct" if name.endswith("percent") else "$sub"
                fx[name] = {op: [fx[f"total_volume_t{a}_mm3"], fx[f"total_volume_t{b}_mm3"]]}

    def answer(self) -> dict:
        return {f: self.field_exprs[f] for f in self.fields}

    # -- topologies ------------------------------------------------------------

    def single(self) -> list[PlanStep]:
        if pre_needed(self.spec, self.req):
            self.preprocess(GENERALIST)
        self.segment(GENERALIST, verify=False)
        if self.req.analysis:
            self.analyse(GENERALIST, self.masks, self.images[(0, "flair")])
        self.add("FinalAnswer", GENERALIST, outputs=self.answer())
        return self.steps

    def _call(self, caller: str, callee: str, task: str, inputs: dict, expected: list[str], work, handoff: bool):
        """Framing around one specialist stage; returns the request step id (None for handoffs)."""
        if handoff:
            self.add("Handoff", caller, callee)
            work()
            self.add("Handoff", callee, caller)
            return None
        rid = self.add("SubagentRequest", caller, callee, task=task, inputs=inputs, expected=expected)
        outputs = work()
        self.add("SubagentResponse", callee, outputs={k: outputs[k] for k in expected})
        return rid

    def _pre_request(self) -> tuple[str, dict, list[str]]:
        if not pre_needed(self.spec, self.req):
            return PRE_NOOP_TASK, {}, []
        keys = {f"tp{tp}_{m}": self.paths[tp][m] for tp in self.req.seg_tps for m in MODALITIES}
        return pre_task(PATHOLOGY_MODELS[self.spec.pathology]["atlas"]), {"atlas": atlas_target(self.spec.pathology), **keys}, list(keys)

    def _seg_request(self) -> tuple[str, dict, list[str]]:
        if self.req.kind == "anatomy":
            return seg_task("anatomy"), {"model": "anatomy", "tp0_t1": self.paths[0]["t1"]}, ["mask_tp0", *ANATOMY_FIELDS]
        inputs = {"model": self.spec.pathology, "atlas": atlas_target(self.spec.pathology)}
        for tp in self.req.seg_tps:
            for m in MODALITIES:
                inputs[f"tp{tp}_{m}"] = self.images[(tp, m)]
        expected = [f"mask_tp{tp}" for tp in self.req.seg_tps] + [k for k in TUMOR_T1_FIELDS if k in self.fields]
        return seg_task(self.spec.pathology), inputs, expected

    def specialists(self, handoff: bool) -> list[PlanStep]:
        if pre_needed(self.spec, self.req):
            task, inputs, expected = self._pre_request()
            self._call(ANA, PRE, task, inputs, expected, lambda: self.preprocess(PRE), handoff)
        task, inputs, expected = self._seg_request()
        self._call(ANA, SEG, task, inputs, expected, lambda: self.segment(SEG, verify=self.req.kind == "tumor"), handoff)
        if self.req.analysis:
            self.analyse(ANA, self.masks, self.images[(0, "flair")])
        self.add("FinalAnswer", ANA, outputs=self.answer())
        return self.steps

    def orchestrator(self) -> list[PlanStep]:
        task, inputs, expected = self._pre_request()
        rid_pre = self._call(ORCH, PRE, task, inputs, expected,
                             lambda: self.preprocess(PRE) if expected else {}, False)
        if expected:
            for key in expected:
                tp, m = key[2:].split("_")
                self.images[(int(tp), m)] = ref(rid_pre, "outputs", key)
        task, inputs, expected = self._seg_request()
        rid_seg = self._call(ORCH, SEG, task, inputs, expected,
                             lambda: self.segment(SEG, verify=self.req.kind == "tumor"), False)
        if not self.req.analysis:
            self.add("FinalAnswer", ORCH, outputs={f: ref(rid_seg, "outputs", f) for f in self.fields})
            return self.steps
        masks = {tp: ref(rid_seg, "outputs", f"mask_tp{tp}") for tp in self.req.seg_tps}
        inputs = {f"mask_tp{tp}": masks[tp] for tp in self.req.seg_tps}
        inputs["flair_tp0"] = self.images[(0, "flair")]
        rid_ana = self._call(ORCH, ANA, ANALYSIS_TASK, inputs, list(self.fields),
                             lambda: self.analyse_answer(ANA, masks, inputs["flair_tp0"]), False)
        self.add("FinalAnswer", ORCH, outputs={f: ref(rid_ana, "outputs", f) for f in self.fields})
        return self.steps

    def analyse_answer(self, agent, masks, flair) -> dict:
        self.analyse(agent, masks, flair)
        return self.answer()


def build_plan(topology: Topology | str, spec: PhantomSpec, fields: list[str],
               new_ids: dict[tuple[int, int], list[int]] | None = None) -> list[PlanStep]:
    """Expected plan for one question; ``new_ids`` lists new lesion ids per timepoint pair."""
    b = _Builder(spec, fields, new_ids or {})
    topology = Topology.parse(topology)
    if topology is Topology.SINGLE:
        return b.single()
    if topology is Topology.ORCHESTRATOR:
        return b.orchestrator()
    return b.specialists(handoff=topology is Topology.HANDOFFS)


def plan_actions(plan: list[PlanStep]) -> int:
    return len(plan)
