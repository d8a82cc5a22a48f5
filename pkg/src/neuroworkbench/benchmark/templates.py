"""Question templates: field grammar, workflow requirements and answer comparisons.

Both the plan builder and the rule-based planner derive the workflow from the
requested field names through :func:`requirements`, so the question text
alone determines which tools must run.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..atlas import PATHOLOGY_MODELS


class TemplateError(ValueError):
    pass


MAX_FIELDS = 30

PATHOLOGY_PHRASES = {
    "glioma": "glioma",
    "postop-glioma": "post-operative glioma",
    "metastasis": "brain metastases",
    "meningioma": "meningioma",
}


def pathology_from_text(text: str) -> str | None:
    """Keyword rules, most specific first."""
    t = text.lower()
    if "post-operative" in t or "postoperative" in t or "resection" in t:
        return "postop-glioma"
    if "metasta" in t:
        return "metastasis"
    if "meningioma" in t:
        return "meningioma"
    if "glioma" in t:
        return "glioma"
    return None


# Per-lesion measurements and the tool that yields them.
ENUM_FIELDS = ("volume_mm3", "centroid_x_mm", "centroid_y_mm", "centroid_z_mm")
FEATURE_FIELDS = ("surface_area_mm2", "sphericity", "elongation", "mean_intensity", "max_intensity")
LESION_FIELDS = ENUM_FIELDS + ("lobe",) + FEATURE_FIELDS

LESION_RE = re.compile(r"^lesion_(\d+)_(" + "|".join(LESION_FIELDS) + r")$")
_COUNT_T_RE = re.compile(r"^lesion_count_t(\d+)$")
_TOTAL_T_RE = re.compile(r"^total_volume_t(\d+)_mm3$")
_CHANGE_RE = re.compile(r"^volume_change_t(\d+)_t(\d+)_(mm3|percent)$")
_NEWRES_RE = re.compile(r"^(new|resolved)_lesions_t(\d+)_t(\d+)$")
_LOBES_RE = re.compile(r"^new_lesion_lobes_t(\d+)_t(\d+)$")

TUMOR_T1_FIELDS = ("model", "segmentation_file")
ANATOMY_FIELDS = ("anatomy_file", "volume_table_file")


@dataclass(frozen=True)
class Comparison:
    kind: str  # exact | numeric | set
    rel_tol: float = 0.0
    abs_tol: float = 0.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rel_tol": self.rel_tol, "abs_tol": self.abs_tol}

    @classmethod
    def from_dict(cls, d: dict) -> "Comparison":
        return cls(d["kind"], float(d.get("rel_tol", 0.0)), float(d.get("abs_tol", 0.0)))


EXACT = Comparison("exact")
COUNT = Comparison("numeric")
RELATIVE = Comparison("numeric", rel_tol=0.01, abs_tol=1e-6)
CENTROID = Comparison("numeric", abs_tol=1.0)
SET = Comparison("set")


def comparison_for(name: str) -> Comparison:
    if name in TUMOR_T1_FIELDS or name in ANATOMY_FIELDS or name.endswith("_lobe"):
        return EXACT
    if name.startswith("new_lesion_lobes"):
        return SET
    if "centroid" in name:
        return CENTROID
    if name == "lesion_count" or _COUNT_T_RE.match(name) or _NEWRES_RE.match(name):
        return COUNT
    return RELATIVE


def aliases_for(name: str) -> list[str]:
    """Alternative spellings the judge accepts for a field name."""
    out = {name.replace("_", " ")}
    for suffix in ("_mm3", "_mm2", "_mm"):
        if name.endswith(suffix):
            out.add(name[: -len(suffix)])
            out.add(name[: -len(suffix)].replace("_", " "))
    out.discard(name)
    return sorted(out)


@dataclass
class Requirements:
    """What must be computed to answer a set of fields."""

    kind: str  # tumor | anatomy
    seg_tps: list[int] = field(default_factory=list)
    enumerate_tps: list[int] = field(default_factory=list)
    localize: list[int] = field(default_factory=list)  # lesion ids at tp0
    features: list[int] = field(default_factory=list)  # lesion ids at tp0
    pairs: list[tuple[int, int]] = field(default_factory=list)
    lobe_pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def analysis(self) -> bool:
        return bool(self.enumerate_tps or self.localize or self.features or self.pairs)


def requirements(fields: list[str]) -> Requirements:
    if not fields:
        raise TemplateError("no fields requested")
    if len(fields) > MAX_FIELDS:
        raise TemplateError(f"at most {MAX_FIELDS} fields per question")
    if set(fields) <= set(ANATOMY_FIELDS):
        return Requirements("anatomy", seg_tps=[0])
    seg, enum, loc, feat = set(), set(), set(), set()
    pairs, lobe_pairs = set(), set()
    for name in fields:
        if name in TUMOR_T1_FIELDS:
            seg.add(0)
        elif name in ("lesion_count", "total_lesion_volume_mm3"):
            seg.add(0)
            enum.add(0)
        elif m := LESION_RE.match(name):
            lesion, what = int(m.group(1)), m.group(2)
            seg.add(0)
            enum.add(0)
            if what == "lobe":
                loc.add(lesion)
            elif what in FEATURE_FIELDS:
                feat.add(lesion)
        elif m := (_COUNT_T_RE.match(name) or _TOTAL_T_RE.match(name)):
            enum.add(int(m.group(1)))
            seg.add(int(m.group(1)))
        elif m := _CHANGE_RE.match(name):
            a, b = int(m.group(1)), int(m.group(2))
            enum |= {a, b}
            seg |= {a, b}
        elif m := _NEWRES_RE.match(name):
            a, b = int(m.group(2)), int(m.group(3))
            pairs.add((a, b))
            seg |= {a, b}
        elif m := _LOBES_RE.match(name):
            a, b = int(m.group(1)), int(m.group(2))
            pairs.add((a, b))
            lobe_pairs.add((a, b))
            seg |= {a, b}
        else:
            raise TemplateError(f"unknown field {name!r}")
    return Requirements("tumor", sorted(seg), sorted(enum), sorted(loc), sorted(feat),
                        sorted(pairs), sorted(lobe_pairs))


def atlas_target(pathology: str) -> str:
    return "atlas:" + PATHOLOGY_MODELS[pathology]["atlas"]


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Template:
    id: str
    tier: int
    lead: str  # question opening; {what} is the pathology phrase

    def question(self, pathology: str, fields: list[str]) -> str:
        what = PATHOLOGY_PHRASES.get(pathology, pathology)
        return f"{self.lead.format(what=what)} Report the following fields: {', '.join(fields)}."


TEMPLATES = {
    t.id: t
    for t in (
        Template("t1_tumor", 1, "Segment the {what} in this case and stop."),
        Template("t1_anatomy", 1, "Segment the brain anatomy into its regions and stop."),
        Template("t2_volume", 2, "Measure the lesion burden of the {what} in this case."),
        Template("t2_location", 2, "Locate each lesion of the {what} in this case."),
        Template("t2_morphology", 2, "Characterise the shape of each lesion of the {what} in this case."),
        Template("t2_intensity", 2, "Summarise the FLAIR intensity of each lesion of the {what} in this case."),
        Template("t3_change", 3, "Track how the {what} changes across the timepoints of this case."),
        Template("t3_new", 3, "Find new and resolved lesions of the {what} across the timepoints of this case."),
    )
}


def fields_from_question(question: str) -> list[str]:
    m = re.search(r"report the following fields:\s*(.+?)\.?\s*$", question.strip().splitlines()[0], re.I)
    if not m:
        return []
    return [f.strip() for f in m.group(1).split(",") if f.strip()]
