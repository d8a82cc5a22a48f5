"""Benchmark construction: phantom case sampling, question items and oracle answers."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage

from .. import atlas
from ..agents import TOPOLOGIES, Topology
from ..atlas import PATHOLOGIES
from ..backends.scripted import PlanStep
from . import oracle
from .phantom import GroundTruth, LesionSpec, PhantomSpec, SpecError, ground_truth, render_lesions, validate_spec
from .plans import build_plan
from .templates import (
    FEATURE_FIELDS, LESION_RE, MAX_FIELDS, TEMPLATES, Comparison, TemplateError, aliases_for, comparison_for,
    requirements,
)

# (cases, queries) per tier.
PROFILES: dict[str, dict[int, tuple[int, int]]] = {
    "default": {1: (29, 43), 2: (150, 565), 3: (36, 267)},
    "small": {1: (4, 6), 2: (6, 12), 3: (4, 8)},
    "tiny": {1: (1, 1), 2: (1, 1), 3: (1, 1)},
}

TIER_TEMPLATES = {
    1: ("t1_tumor", "t1_anatomy"),
    2: ("t2_volume", "t2_location", "t2_morphology", "t2_intensity"),
    3: ("t3_change", "t3_new"),
}

MATCH_IOU_FLOOR = 0.4  # persistent lesions stay well above the 0.25 matching threshold
MIN_LESION_VOXELS = 6
GAP_VOXELS = 3


@dataclass(frozen=True)
class ExpectedField:
    field: str
    value: Any
    comparison: Comparison
    aliases: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"field": self.field, "value": self.value, "comparison": self.comparison.to_dict(),
                "aliases": list(self.aliases)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpectedField":
        return cls(d["field"], d["value"], Comparison.from_dict(d["comparison"]), tuple(d.get("aliases", ())))


@dataclass
class BenchmarkItem:
    item_id: str
    tier: int
    template: str
    question: str
    case: str
    timepoints: list[int]
    expected_plans: dict[str, list[PlanStep]]
    expected_answer: list[ExpectedField]
    extra: dict = field(default_factory=dict)  # unknown record fields, kept verbatim

    @property
    def fields(self) -> list[str]:
        return [f.field for f in self.expected_answer]

    def plan(self, topology: Topology | str) -> list[PlanStep] | None:
        return self.expected_plans.get(Topology.parse(topology).value)

    def to_dict(self) -> dict:
        d = {
            "item_id": self.item_id,
            "tier": self.tier,
            "template": self.template,
            "question": self.question,
            "case": self.case,
            "timepoints": list(self.timepoints),
            "expected_plans": {t: [s.to_dict() for s in steps] for t, steps in self.expected_plans.items()},
            "expected_answer": [f.to_dict() for f in self.expected_answer],
        }
        d.update(self.extra)
        return d


@dataclass
class Dataset:
    items: list[BenchmarkItem]
    cases: dict[str, PhantomSpec]
    seed: int = 0
    profile: str = "custom"
    extra_manifest: dict = field(default_factory=dict)

    def case(self, case_id: str) -> PhantomSpec:
        return self.cases[case_id]

    def by_tier(self, tier: int) -> list[BenchmarkItem]:
        return [i for i in self.items if i.tier == tier]


# ---------------------------------------------------------------------------
# Case sampling
# ---------------------------------------------------------------------------


def _sample_lesion(rng: np.random.Generator, small: bool) -> tuple[tuple[float, ...], tuple[float, ...]]:
    while True:
        u = rng.uniform(-1, 1, 3)
        if np.linalg.norm(u) <= 1:
            break
    center = tuple(round(float(c * 0.6 * r), 2) for c, r in zip(u, atlas.BRAIN_RADII))
    lo, hi = (1.6, 2.8) if small else (3.0, 4.5)
    radii = tuple(round(float(r), 2) for r in rng.uniform(lo, hi, 3))
    return center, radii


def _scale(rng: np.random.Generator) -> float:
    # Away from 1 so volume changes are clear, close enough that IoU stays above the floor.
    s = rng.uniform(0.8, 0.92) if rng.random() < 0.5 else rng.uniform(1.08, 1.22)
    return round(float(s), 3)


def _scales(rng, timepoints: int, presence: tuple[bool, ...]) -> tuple[float | None, ...]:
    out, s = [], 1.0
    for tp in range(timepoints):
        if tp > 0:
            s = round(s * _scale(rng), 3)
        out.append(s if presence[tp] else None)
    return tuple(out)


def _presence_patterns(n: int, timepoints: int, rng) -> list[tuple[bool, ...]]:
    """Per-lesion presence; metastasis cases get one new and/or one resolved lesion."""
    pats = [tuple([True] * timepoints) for _ in range(n)]
    if timepoints > 1 and n >= 2:
        kind = rng.integers(3)  # 0 new, 1 resolved, 2 both
        if kind in (0, 2):
            onset = int(rng.integers(1, timepoints))
            pats[-1] = tuple(tp >= onset for tp in range(timepoints))
        if kind in (1, 2) and n >= 3:
            end = int(rng.integers(1, timepoints))
            pats[-2] = tuple(tp < end for tp in range(timepoints))
    return pats


def _acceptable(spec: PhantomSpec) -> bool:
    try:
        validate_spec(spec)
    except SpecError:
        return False
    pts = atlas.world_points(spec.grid)
    unions = [np.zeros(spec.grid.dims, bool) for _ in spec.lesions]
    per_tp = []
    for tp in range(spec.timepoints):
        inst, sources, _ = render_lesions(spec, tp, pts)
        if not sources:
            return False
        masks = {}
        for k, src in enumerate(sources, start=1):
            m = inst == k
            if m.sum() < MIN_LESION_VOXELS:
                return False
            masks[src] = m
            unions[src] |= m
        per_tp.append(masks)
    grow = ndimage.generate_binary_structure(3, 3)
    for i, j in itertools.combinations(range(len(spec.lesions)), 2):
        if (ndimage.binary_dilation(unions[i], grow, iterations=GAP_VOXELS - 1) & unions[j]).any():
            return False
    for a, b in itertools.combinations(range(spec.timepoints), 2):
        for src in per_tp[a].keys() & per_tp[b].keys():
            m0, m1 = per_tp[a][src], per_tp[b][src]
            if (m0 & m1).sum() / (m0 | m1).sum() < MATCH_IOU_FLOOR:
                return False
        v0 = sum(m.sum() for m in per_tp[a].values())
        v1 = sum(m.sum() for m in per_tp[b].values())
        if abs(v1 - v0) < 0.03 * v0:
            return False
    return True


def sample_case(case_id: str, pathology: str, timepoints: int, preprocessed: bool,
                rng: np.random.Generator, n_lesions: int = 1) -> PhantomSpec:
    if pathology != "metastasis":
        n_lesions = 1
    for _ in range(500):
        pats = _presence_patterns(n_lesions, timepoints, rng)
        lesions = []
        for k in range(n_lesions):
            center, radii = _sample_lesion(rng, small=pathology == "metastasis")
            intensity = round(float(rng.uniform(0.85, 1.15)), 3)
            lesions.append(LesionSpec(center, radii, intensity, _scales(rng, timepoints, pats[k])))
        offset = (0, 0, 0)
        while not preprocessed and offset == (0, 0, 0):
            offset = tuple(int(v) for v in rng.integers(-2, 3, 3))
        spec = PhantomSpec(case_id, pathology, tuple(lesions), timepoints, preprocessed,
                           int(rng.integers(0, 2**31 - 1)), offset)
        if _acceptable(spec):
            return spec
    raise SpecError(f"could not place lesions for case {case_id}")


# ---------------------------------------------------------------------------
# Oracle answers
# ---------------------------------------------------------------------------


def expected_value(gt: GroundTruth, name: str) -> Any:
    spec = gt.spec
    if name == "model":
        return spec.pathology
    if name == "segmentation_file":
        return f"outputs/{spec.case_id}/tp0/{spec.pathology}_seg.nii"
    if name == "anatomy_file":
        return f"outputs/{spec.case_id}/tp0/synthseg.nii"
    if name == "volume_table_file":
        return f"outputs/{spec.case_id}/tp0/synthseg_volumes.csv"
    if name == "lesion_count":
        return len(oracle.lesions(gt, 0))
    if name == "total_lesion_volume_mm3":
        return oracle.total_volume(gt, 0)
    if m := LESION_RE.match(name):
        lesion = oracle.lesions(gt, 0)[int(m.group(1)) - 1]
        what = m.group(2)
        if what == "volume_mm3":
            return lesion.volume_mm3
        if what.startswith("centroid_"):
            return lesion.centroid["xyz".index(what[9])]
        if what == "lobe":
            return oracle.lobe(gt, lesion)[0]
        return oracle.features(gt, 0, lesion)[what]
    parts = name.split("_")
    if name.startswith("lesion_count_t"):
        return len(oracle.lesions(gt, int(parts[2][1:])))
    if name.startswith("total_volume_t"):
        return oracle.total_volume(gt, int(parts[2][1:]))
    if name.startswith("volume_change_"):
        a, b = (int(p[1:]) for p in parts[2:4])
        va, vb = oracle.total_volume(gt, a), oracle.total_volume(gt, b)
        return vb - va if parts[4] == "mm3" else 100.0 * (vb - va) / va
    if name.startswith(("new_lesions_", "resolved_lesions_")):
        a, b = (int(p[1:]) for p in parts[2:4])
        _, new, resolved = oracle.correspondence(gt, a, b)
        return len(new) if parts[0] == "new" else len(resolved)
    if name.startswith("new_lesion_lobes_"):
        a, b = (int(p[1:]) for p in parts[3:5])
        _, new, _ = oracle.correspondence(gt, a, b)
        at_b = {l.id: l for l in oracle.lesions(gt, b)}
        return sorted({oracle.lobe(gt, at_b[i])[0] for i in new})
    raise TemplateError(f"no oracle for field {name!r}")


def new_lesion_ids(gt: GroundTruth, fields: list[str]) -> dict[tuple[int, int], list[int]]:
    return {(a, b): oracle.correspondence(gt, a, b)[1] for a, b in requirements(fields).lobe_pairs}


def build_item(item_id: str, template_id: str, spec: PhantomSpec, fields: list[str],
               topologies=TOPOLOGIES) -> BenchmarkItem:
    template = TEMPLATES.get(template_id)
    if template is None:
        raise TemplateError(f"unknown template {template_id!r}")
    if template_id == "t1_tumor" and not spec.preprocessed:
        raise TemplateError("tier-1 tumour items use preprocessed cases")
    if template.tier == 3 and spec.timepoints < 2:
        raise TemplateError("tier-3 items need at least two timepoints")
    gt = ground_truth(spec)
    req = requirements(fields)
    new_ids = new_lesion_ids(gt, fields)
    plans = {Topology.parse(t).value: build_plan(t, spec, fields, new_ids) for t in topologies}
    answer = [ExpectedField(f, expected_value(gt, f), comparison_for(f), tuple(aliases_for(f))) for f in fields]
    tps = sorted(set(req.seg_tps) | set(req.enumerate_tps))
    return BenchmarkItem(item_id, template.tier, template_id, template.question(spec.pathology, fields),
                         spec.case_id, tps, plans, answer)


def _fields_for(template_id: str, spec: PhantomSpec, rng: np.random.Generator) -> list[str]:
    gt = ground_truth(spec)
    n = len(oracle.lesions(gt, 0))
    if template_id == "t1_tumor":
        return ["model", "segmentation_file"]
    if template_id == "t1_anatomy":
        return ["anatomy_file", "volume_table_file"]
    if template_id.startswith("t2_"):
        per = {
            "t2_volume": ["volume_mm3"],
            "t2_location": ["lobe", "centroid_x_mm", "centroid_y_mm", "centroid_z_mm"],
            "t2_morphology": ["volume_mm3", "sphericity", "surface_area_mm2", "elongation"],
            "t2_intensity": ["mean_intensity", "max_intensity"],
        }[template_id]
        head = {"t2_volume": ["lesion_count", "total_lesion_volume_mm3"], "t2_intensity": ["lesion_count"]}.get(template_id, [])
        k = int(rng.integers(1, n + 1))
        chosen = sorted(rng.choice(np.arange(1, n + 1), size=k, replace=False).tolist())
        out = list(head)
        for i in chosen:
            if len(out) + len(per) > MAX_FIELDS:
                break
            out += [f"lesion_{i}_{f}" for f in per]
        return out
    pairs = [(a, a + 1) for a in range(spec.timepoints - 1)]
    if spec.timepoints == 3 and rng.random() < 0.5:
        pairs.append((0, 2))
    k = int(rng.integers(1, len(pairs) + 1))
    chosen = [pairs[i] for i in sorted(rng.choice(len(pairs), size=k, replace=False).tolist())]
    out: list[str] = []
    for a, b in chosen:
        if template_id == "t3_change":
            pool = [f"total_volume_t{a}_mm3", f"total_volume_t{b}_mm3", f"volume_change_t{a}_t{b}_mm3",
                    f"volume_change_t{a}_t{b}_percent", f"lesion_count_t{b}"]
            keep = [f for f in pool if rng.random() < 0.7] or [pool[2]]
        else:
            pool = [f"new_lesions_t{a}_t{b}", f"resolved_lesions_t{a}_t{b}", f"new_lesion_lobes_t{a}_t{b}"]
            keep = [f for f in pool if rng.random() < 0.7] or [pool[0]]
        out += [f for f in keep if f not in out]
    return out


def _case_plan(tier: int, index: int, rng) -> tuple[str, int, bool, int]:
    pathology = PATHOLOGIES[index % len(PATHOLOGIES)]
    if tier == 1:
        return pathology, 1, True, int(rng.integers(1, 4))
    if tier == 2:
        return pathology, 1, bool(rng.random() < 0.5), int(rng.integers(2, 6))
    return pathology, int(rng.integers(2, 4)), bool(rng.random() < 0.5), int(rng.integers(2, 5))


def generate_suite(profile: str | dict = "default", seed: int = 0) -> Dataset:
    counts = PROFILES[profile] if isinstance(profile, str) else profile
    name = profile if isinstance(profile, str) else "custom"
    for tier, (n_cases, n_queries) in counts.items():
        if n_cases < 1 or n_queries < n_cases:
            raise ValueError(f"tier {tier}: need 1 <= cases <= queries")
    items, cases = [], {}
    for tier in sorted(counts):
        n_cases, n_queries = counts[tier]
        per_case = [n_queries // n_cases + (i < n_queries % n_cases) for i in range(n_cases)]
        serial = 0
        for ci in range(n_cases):
            rng = np.random.default_rng([seed, tier, ci])
            pathology, tps, pre, n_les = _case_plan(tier, ci, rng)
            case_id = f"t{tier}c{ci:03d}"
            spec = sample_case(case_id, pathology, tps, pre, rng, n_les)
            cases[case_id] = spec
            seen = set()
            templates = TIER_TEMPLATES[tier]
            for q in range(per_case[ci]):
                template_id = templates[(ci + q) % len(templates)]
                for _ in range(20):
                    fields = _fields_for(template_id, spec, rng)
                    if (template_id, tuple(fields)) not in seen:
                        break
                seen.add((template_id, tuple(fields)))
                serial += 1
                items.append(build_item(f"t{tier}-{serial:04d}", template_id, spec, fields))
    return Dataset(items, cases, seed, name)


def mean_plan_lengths(items: list[BenchmarkItem]) -> dict[str, float]:
    out = {}
    for t in TOPOLOGIES:
        lens = [len(i.plan(t)) for i in items if i.plan(t) is not None]
        out[t.value] = sum(lens) / len(lens) if lens else 0.0
    return out
