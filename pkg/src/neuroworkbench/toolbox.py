"""Agent-facing neuro-imaging tools simulated over phantom ground truth.

Every tool takes plain JSON-like arguments (text, numbers, handle ids) and
returns a :class:`ToolResult`. Failures are reported in the envelope rather
than raised, so an agent observes them and can recover.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy import ndimage

from . import atlas
from .atlas import ATLAS_GRIDS, LOBES, MODALITIES, PATHOLOGY_MODELS
from .benchmark.phantom import CaseBundle, GroundTruth
from .nifti import read_volume, write_volume
from .volume import (
    DEFAULT_CONNECTIVITY,
    GridError,
    LabelMask,
    VolumeError,
    VoxelVolume,
    apply_affine,
    compare_headers,
    connected_components,
    resample,
)

DEFAULT_MATCH_THRESHOLD = 0.25
HANDLE_KINDS = ("image", "mask", "report")


class ToolFailure(Exception):
    """Raised inside a tool body; converted to an error envelope."""

    def __init__(self, kind: str, message: str, **detail):
        super().__init__(message)
        self.kind = kind
        self.detail = detail


@dataclass(frozen=True)
class ObjectHandle:
    id: str
    kind: str
    origin: str


@dataclass
class ToolResult:
    status: str
    payload: dict = field(default_factory=dict)
    handles: list[ObjectHandle] = field(default_factory=list)
    error_kind: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        out = {"status": self.status, "payload": self.payload, "handles": [h.id for h in self.handles]}
        if self.error_kind is not None:
            out["error_kind"] = self.error_kind
        return out

    @classmethod
    def error(cls, kind: str, message: str, **detail) -> "ToolResult":
        return cls("error", {"message": message, **detail}, [], kind)


class HandleStore:
    """Episode-local object store issuing sequential ids ``obj_1``, ``obj_2``, ..."""

    def __init__(self):
        self._objects: dict[str, tuple[ObjectHandle, Any]] = {}
        self._counter = 0

    def issue(self, kind: str, origin: str, obj: Any) -> ObjectHandle:
        if kind not in HANDLE_KINDS:
            raise ValueError(f"unknown handle kind {kind!r}")
        self._counter += 1
        handle = ObjectHandle(f"obj_{self._counter}", kind, origin)
        self._objects[handle.id] = (handle, obj)
        return handle

    def __contains__(self, handle_id) -> bool:
        return isinstance(handle_id, str) and handle_id in self._objects

    def __len__(self) -> int:
        return len(self._objects)

    def get(self, handle_id: str, kind: str | None = None):
        if handle_id not in self._objects:
            raise ToolFailure("bad_handle", f"no object with id {handle_id!r}")
        handle, obj = self._objects[handle_id]
        if kind is not None and handle.kind != kind:
            raise ToolFailure("wrong_kind", f"{handle_id} is a {handle.kind}, expected {kind}")
        return handle, obj


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: str
    required: bool = True
    description: str = ""
    choices: tuple[str, ...] = ()


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    description: str
    params: tuple[ParamSpec, ...]
    returns: str

    def param(self, name: str) -> ParamSpec | None:
        for p in self.params:
            if p.name == name:
                return p
        return None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "params": [
                {k: v for k, v in (("name", p.name), ("type", p.type), ("required", p.required),
                                   ("description", p.description), ("choices", list(p.choices))) if v != []}
                for p in self.params
            ],
            "returns": self.returns,
        }


_MODELS = tuple(PATHOLOGY_MODELS)
_IMG = "image handle id or case file path"

TOOL_DESCRIPTORS: tuple[ToolDescriptor, ...] = (
    ToolDescriptor("load_image", "Load a scan from the case bundle into memory.",
                   (ParamSpec("path", "text", description="case file path"),),
                   "image handle, dims, spacing, space"),
    ToolDescriptor("skull_strip", "Remove non-brain voxels (SynthStrip).",
                   (ParamSpec("image", "image", description=_IMG),),
                   "skull-stripped image handle and brain_volume_mm3"),
    ToolDescriptor("register", "Rigidly register an image to an atlas (atlas:SRI24, atlas:MNI152) or to another image.",
                   (ParamSpec("image", "image", description=_IMG),
                    ParamSpec("target", "text", description="atlas:SRI24, atlas:MNI152, or an image handle/path")),
                   "registered image handle and its space"),
    ToolDescriptor("resample", "Resample an image or mask to a new voxel spacing in mm.",
                   (ParamSpec("image", "image", description="image or mask handle, or case file path"),
                    ParamSpec("spacing", "number_list", description="three spacings in mm"),
                    ParamSpec("interpolation", "enum", False, "nearest or trilinear (masks: nearest)", ("nearest", "trilinear"))),
                   "resampled handle"),
    ToolDescriptor("verify_registration", "Compare image headers (dims, spacing, origin, orientation) against an atlas or another image.",
                   (ParamSpec("image", "image", description=_IMG),
                    ParamSpec("reference", "text", description="atlas name or image handle/path")),
                   "equal flag and list of mismatching header fields"),
    ToolDescriptor("segment_pathology", "Run a BraTS tumour segmentation model. Inputs must be skull-stripped and in the model's atlas space (MNI152 for postop-glioma, SRI24 otherwise).",
                   (ParamSpec("t1", "image", description=_IMG), ParamSpec("t1ce", "image", description=_IMG),
                    ParamSpec("t2", "image", description=_IMG), ParamSpec("flair", "image", description=_IMG),
                    ParamSpec("model", "enum", description="segmentation model", choices=_MODELS)),
                   "tumour mask handle, label vocabulary and output file"),
    ToolDescriptor("segment_anatomy", "Segment 32 anatomical brain regions (SynthSeg); also writes a region volume table.",
                   (ParamSpec("image", "image", description=_IMG),),
                   "anatomy mask handle, volume table handle, region volumes and output files"),
    ToolDescriptor("list_labels", "List label ids and names for a scope: a segmentation model name, 'anatomy' or 'lobes'.",
                   (ParamSpec("scope", "text", description="model name, anatomy, or lobes"),),
                   "id to name map"),
    ToolDescriptor("enumerate_lesions", "Split a lesion mask into connected components.",
                   (ParamSpec("mask", "handle", description="mask handle"),),
                   "lesion count and per-lesion id, volume_mm3, centroid_mm"),
    ToolDescriptor("match_lesions", "Match lesions one-to-one between two timepoints by IoU.",
                   (ParamSpec("mask_t0", "handle", description="earlier mask handle"),
                    ParamSpec("mask_t1", "handle", description="later mask handle"),
                    ParamSpec("threshold", "number", False, "minimum IoU for a match, default 0.25")),
                   "matched pairs with IoU, new and resolved lesion ids, unmatched centroids"),
    ToolDescriptor("lesion_geometry", "Sub-volume geometry of one lesion: volume, bounding box, centroid.",
                   (ParamSpec("mask", "handle", description="mask handle"),
                    ParamSpec("lesion_id", "integer", description="lesion id from enumerate_lesions")),
                   "volume_mm3, voxel_count, centroid_mm, bounding box"),
    ToolDescriptor("lesion_features", "Morphological and intensity features of one lesion (PyRadiomics subset).",
                   (ParamSpec("mask", "handle", description="mask handle"),
                    ParamSpec("image", "image", description=_IMG),
                    ParamSpec("lesion_id", "integer", description="lesion id from enumerate_lesions")),
                   "lesion record with surface area, sphericity, elongation, mean/max intensity"),
    ToolDescriptor("localize", "Assign a lesion to a brain lobe (lobe atlas); mask must be in atlas space.",
                   (ParamSpec("mask", "handle", description="mask handle"),
                    ParamSpec("lesion_id", "integer", description="lesion id from enumerate_lesions")),
                   "lobe name and overlap fraction"),
    ToolDescriptor("visualize", "Render the mid-axial slice as a PGM image, optionally overlaying a mask.",
                   (ParamSpec("image", "image", description=_IMG),
                    ParamSpec("mask", "handle", False, "optional mask handle")),
                   "path of the written image"),
)


@functools.lru_cache(maxsize=512)
def _load_cached(path: str) -> VoxelVolume:
    return read_volume(path)


def _round(x: float, digits: int = 6) -> float:
    return float(round(float(x), digits))


def surface_area(binary: np.ndarray, spacing) -> float:
    """Area of exposed voxel faces in mm^2."""
    sx, sy, sz = spacing
    face = (sy * sz, sx * sz, sx * sy)
    padded = np.pad(binary, 1)
    total = 0.0
    for axis in range(3):
        total += face[axis] * np.count_nonzero(np.diff(padded.astype(np.int8), axis=axis))
    return total


def sphericity(volume_mm3: float, area_mm2: float) -> float:
    return (math.pi ** (1 / 3)) * (6 * volume_mm3) ** (2 / 3) / area_mm2


def elongation(points_mm: np.ndarray) -> float:
    """sqrt(minor / major) principal-axis variance ratio; 1 for fewer than two voxels."""
    if len(points_mm) < 2:
        return 1.0
    eig = np.linalg.eigvalsh(np.cov(points_mm.T, bias=True))
    if eig[-1] <= 0:
        return 1.0
    return math.sqrt(max(eig[0], 0.0) / eig[-1])


class Toolbox:
    """Tool implementations for one episode over one case."""

    def __init__(
        self,
        case: CaseBundle,
        truth: GroundTruth,
        *,
        noise: float = 0.0,
        connectivity: int = DEFAULT_CONNECTIVITY,
        match_threshold: float = DEFAULT_MATCH_THRESHOLD,
        output_dir: str | Path | None = None,
        store: HandleStore | None = None,
    ):
        self.case = case
        self.truth = truth
        self.noise = float(noise)
        self.connectivity = connectivity
        self.match_threshold = match_threshold
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.store = store if store is not None else HandleStore()
        self._paths = {
            rel: (tp, modality)
            for tp, per_mod in enumerate(case.files)
            for modality, rel in per_mod.items()
        }
        self.tools: dict[str, Callable[..., ToolResult]] = {
            d.name: getattr(self, f"tool_{d.name}") for d in TOOL_DESCRIPTORS
        }

    # -- envelope ----------------------------------------------------------

    def call(self, name: str, args: dict) -> ToolResult:
        fn = self.tools.get(name)
        if fn is None:
            return ToolResult.error("unknown_tool", f"no tool named {name!r}")
        try:
            return fn(**args)
        except ToolFailure as exc:
            return ToolResult.error(exc.kind, str(exc), **exc.detail)
        except GridError as exc:
            return ToolResult.error("grid_error", str(exc))
        except (VolumeError, ValueError, TypeError) as exc:
            return ToolResult.error("bad_argument", str(exc))

    # -- argument resolution -------------------------------------------------

    def _space(self, vol: VoxelVolume) -> str:
        return vol.meta.get("space", "native")

    def _load_path(self, path: str) -> VoxelVolume:
        if path not in self._paths:
            raise ToolFailure("not_found", f"no file {path!r} in this case")
        tp, modality = self._paths[path]
        vol = _load_cached(str(self.case.resolve(path)))
        space = self.truth.atlas if self.case.preprocessed else "native"
        return vol.with_meta(
            kind="image", case=self.case.case_id, tp=str(tp), modality=modality, space=space,
            skull_stripped="1" if self.case.preprocessed else "0",
        )

    def _image(self, ref, *, allow_mask: bool = False):
        if not isinstance(ref, str):
            raise ToolFailure("bad_argument", f"expected a handle id or path, got {ref!r}")
        if ref in self.store:
            handle, obj = self.store.get(ref)
            if handle.kind == "image" or (allow_mask and handle.kind == "mask"):
                return obj
            raise ToolFailure("wrong_kind", f"{ref} is a {handle.kind}, expected image")
        if ref.startswith("obj_"):
            raise ToolFailure("bad_handle", f"no object with id {ref!r}")
        return self._load_path(ref)

    def _mask(self, ref) -> LabelMask:
        if not isinstance(ref, str):
            raise ToolFailure("bad_argument", f"expected a mask handle id, got {ref!r}")
        _, obj = self.store.get(ref, "mask")
        return obj

    def _lesion(self, mask: LabelMask, lesion_id):
        try:
            lesion_id = int(lesion_id)
        except (TypeError, ValueError):
            raise ToolFailure("bad_argument", f"lesion_id must be an integer, got {lesion_id!r}")
        cs = connected_components(mask, "any", self.connectivity)
        if not 1 <= lesion_id <= cs.count:
            raise ToolFailure("not_found", f"lesion {lesion_id} not present (mask has {cs.count})")
        return cs, cs.get(lesion_id)

    def _out_path(self, rel: str) -> str:
        if self.output_dir is not None:
            target = self.output_dir / rel
            target.parent.mkdir(parents=True, exist_ok=True)
        return rel

    def _tp(self, vol) -> str:
        meta = vol.grid.meta if isinstance(vol, LabelMask) else vol.meta
        return meta.get("tp", "0")

    # -- preprocessing -------------------------------------------------------

    def tool_load_image(self, path) -> ToolResult:
        vol = self._load_path(path)
        h = self.store.issue("image", "load_image", vol)
        return ToolResult("ok", {"image": h.id, "dims": list(vol.dims), "spacing": list(vol.spacing),
                                 "space": self._space(vol)}, [h])

    def tool_skull_strip(self, image) -> ToolResult:
        vol = self._image(image)
        brain = self.truth.brain_in(vol.grid, self._space(vol))
        data = np.where(brain, vol.data, 0).astype(vol.data.dtype)
        out = vol.with_data(data, {"skull_stripped": "1"})
        h = self.store.issue("image", "skull_strip", out)
        brain_mm3 = int(np.count_nonzero(brain)) * vol.voxel_volume_mm3
        return ToolResult("ok", {"image": h.id, "brain_volume_mm3": _round(brain_mm3)}, [h])

    def _target_space(self, target):
        """Resolve a registration target to (grid, space name)."""
        if not isinstance(target, str):
            raise ToolFailure("bad_argument", f"bad target {target!r}")
        name = target.split(":", 1)[1] if target.startswith("atlas:") else target
        if name in ATLAS_GRIDS:
            return ATLAS_GRIDS[name], name
        if target.startswith("atlas:"):
            raise ToolFailure("bad_argument", f"unknown atlas {name!r}; known: {sorted(ATLAS_GRIDS)}")
        ref = self._image(target, allow_mask=True)
        ref_vol = ref.grid if isinstance(ref, LabelMask) else ref
        return ref_vol.grid, self._space(ref_vol)

    def _transform(self, src_space: str, dst_space: str) -> np.ndarray:
        t = np.eye(4)
        if src_space == "native" and dst_space != "native":
            t[:3] = self.truth.native_to_atlas
        elif src_space != "native" and dst_space == "native":
            t[:3, 3] = -self.truth.native_to_atlas[:, 3]
        return t

    def tool_register(self, image, target) -> ToolResult:
        vol = self._image(image)
        grid, space = self._target_space(target)
        out = apply_affine(vol, self._transform(self._space(vol), space), grid, "nearest")
        out = out.with_meta(space=space)
        h = self.store.issue("image", "register", out)
        return ToolResult("ok", {"image": h.id, "space": space}, [h])

    def tool_resample(self, image, spacing, interpolation="trilinear") -> ToolResult:
        obj = self._image(image, allow_mask=True)
        if not isinstance(spacing, (list, tuple)) or len(spacing) != 3:
            raise ToolFailure("bad_argument", "spacing must be a list of three numbers")
        if isinstance(obj, LabelMask):
            out = resample(obj, spacing, "nearest")
            h = self.store.issue("mask", "resample", out)
            return ToolResult("ok", {"mask": h.id, "dims": list(out.dims)}, [h])
        out = resample(obj, spacing, interpolation)
        h = self.store.issue("image", "resample", out)
        return ToolResult("ok", {"image": h.id, "dims": list(out.dims)}, [h])

    def tool_verify_registration(self, image, reference) -> ToolResult:
        obj = self._image(image, allow_mask=True)
        grid, _ = self._target_space(reference)
        diff = compare_headers(obj, grid)
        mismatches = [{"field": f, "image": a, "reference": b} for f, a, b in diff.mismatches]
        return ToolResult("ok", {"equal": diff.equal, "mismatches": mismatches})

    # -- segmentation --------------------------------------------------------

    def tool_segment_pathology(self, t1=None, t1ce=None, t2=None, flair=None, model=None) -> ToolResult:
        inputs = {"t1": t1, "t1ce": t1ce, "t2": t2, "flair": flair}
        missing = [m for m, v in inputs.items() if v is None]
        if missing:
            raise ToolFailure("missing_input", f"missing modalities: {', '.join(missing)}", missing=missing)
        if model not in PATHOLOGY_MODELS:
            raise ToolFailure("bad_argument", f"unknown model {model!r}; known: {list(PATHOLOGY_MODELS)}")
        vols = {m: self._image(v) for m, v in inputs.items()}
        template = ATLAS_GRIDS[PATHOLOGY_MODELS[model]["atlas"]]
        for m, vol in vols.items():
            if vol.meta.get("skull_stripped") != "1":
                raise ToolFailure("precondition_failed", f"{m} is not skull-stripped", check="skull_strip", input=m)
        for m, vol in vols.items():
            if not compare_headers(vol, template).equal:
                raise ToolFailure("precondition_failed", f"{m} is not in {PATHOLOGY_MODELS[model]['atlas']} space",
                                  check="space", input=m)
        tps = {vol.meta.get("tp") for vol in vols.values()}
        if len(tps) != 1:
            raise ToolFailure("precondition_failed", "inputs come from different timepoints", check="timepoint")
        tp = int(tps.pop())
        vocab = PATHOLOGY_MODELS[model]["labels"]
        if model == self.case.pathology:
            data = self.truth.subregions[tp].data
            if self.noise > 0:
                data = self._degrade(data, tp)
        else:
            data = np.zeros(template.dims, dtype=np.uint8)
        rel = self._out_path(f"outputs/{self.case.case_id}/tp{tp}/{model}_seg.nii")
        mask = LabelMask.from_array(data, template.affine, vocab,
                                    {"space": PATHOLOGY_MODELS[model]["atlas"], "tp": str(tp), "model": model,
                                     "case": self.case.case_id})
        if self.output_dir is not None:
            write_volume(mask.grid, self.output_dir / rel)
        h = self.store.issue("mask", "segment_pathology", mask)
        labels = {str(k): v for k, v in vocab.items()}
        return ToolResult("ok", {"mask": h.id, "model": model, "labels": labels, "output_file": rel}, [h])

    def _degrade(self, data: np.ndarray, tp: int) -> np.ndarray:
        """Erode or dilate each lesion by one voxel with a seeded per-lesion choice."""
        instances = self.truth.lesions[tp].data
        out = data.copy()
        ball = ndimage.generate_binary_structure(3, 1)
        brain = self.truth.brain_mask.data != 0
        for inst in range(1, int(instances.max(initial=0)) + 1):
            rng = np.random.default_rng([self.truth.spec.seed, tp, inst])
            if rng.random() >= self.noise:
                continue
            lesion = instances == inst
            if rng.random() < 0.5:
                eroded = ndimage.binary_erosion(lesion, ball)
                if eroded.any():
                    out[lesion & ~eroded] = 0
            else:
                grown = ndimage.binary_dilation(lesion, ball) & brain & (instances == 0)
                out[grown] = 2
        return out

    def tool_segment_anatomy(self, image) -> ToolResult:
        vol = self._image(image)
        space = self._space(vol)
        labels = self.truth.anatomy_in(vol.grid, space)
        tp = self._tp(vol)
        mask = LabelMask.from_array(labels, vol.affine, atlas.ANATOMY_LABELS,
                                    {"space": space, "tp": tp, "case": self.case.case_id})
        counts = np.bincount(labels.ravel(), minlength=max(atlas.ANATOMY_LABELS) + 1)
        rows = [
            {"label_id": k, "region_name": name, "volume_mm3": _round(int(counts[k]) * vol.voxel_volume_mm3)}
            for k, name in sorted(atlas.ANATOMY_LABELS.items())
        ]
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["label_id", "region_name", "volume_mm3"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        table = buf.getvalue()
        base = f"outputs/{self.case.case_id}/tp{tp}"
        mask_rel = self._out_path(f"{base}/synthseg.nii")
        table_rel = self._out_path(f"{base}/synthseg_volumes.csv")
        if self.output_dir is not None:
            write_volume(mask.grid, self.output_dir / mask_rel)
            (self.output_dir / table_rel).write_text(table)
        hm = self.store.issue("mask", "segment_anatomy", mask)
        ht = self.store.issue("report", "segment_anatomy", table)
        return ToolResult(
            "ok",
            {"mask": hm.id, "volume_table": ht.id, "region_count": len(rows), "regions": rows,
             "output_files": [mask_rel, table_rel]},
            [hm, ht],
        )

    def tool_list_labels(self, scope) -> ToolResult:
        if scope == "anatomy":
            labels = atlas.ANATOMY_LABELS
        elif scope == "lobes":
            labels = LOBES
        elif scope in PATHOLOGY_MODELS:
            labels = PATHOLOGY_MODELS[scope]["labels"]
        else:
            raise ToolFailure("bad_argument", f"unknown scope {scope!r}")
        return ToolResult("ok", {"scope": scope, "labels": {str(k): v for k, v in sorted(labels.items())}})

    # -- analysis ------------------------------------------------------------

    def _lesion_summary(self, mask: LabelMask, comp) -> dict:
        return {
            "id": comp.id,
            "voxel_count": comp.voxel_count,
            "volume_mm3": _round(comp.voxel_count * mask.grid.voxel_volume_mm3),
            "centroid_mm": [_round(c, 4) for c in comp.centroid],
        }

    def tool_enumerate_lesions(self, mask) -> ToolResult:
        m = self._mask(mask)
        cs = connected_components(m, "any", self.connectivity)
        lesions = [self._lesion_summary(m, c) for c in cs.components]
        return ToolResult("ok", {"lesion_count": cs.count, "lesions": lesions,
                                 "total_volume_mm3": _round(sum(l["volume_mm3"] for l in lesions))})

    def tool_match_lesions(self, mask_t0, mask_t1, threshold=None) -> ToolResult:
        threshold = self.match_threshold if threshold is None else float(threshold)
        m0, m1 = self._mask(mask_t0), self._mask(mask_t1)
        if m0.grid.grid != m1.grid.grid:
            raise ToolFailure("grid_error", "masks are on different grids")
        c0 = connected_components(m0, "any", self.connectivity)
        c1 = connected_components(m1, "any", self.connectivity)
        pairs = greedy_match(iou_matrix(c0.labeling, c0.count, c1.labeling, c1.count), threshold)
        matched0 = {p[0] for p in pairs}
        matched1 = {p[1] for p in pairs}
        new = [c.id for c in c1.components if c.id not in matched1]
        resolved = [c.id for c in c0.components if c.id not in matched0]
        return ToolResult("ok", {
            "pairs": [{"id_t0": a, "id_t1": b, "iou": _round(v)} for a, b, v in pairs],
            "new": new,
            "resolved": resolved,
            "threshold": threshold,
            "lesion_count_t0": c0.count,
            "lesion_count_t1": c1.count,
            "unmatched_centroids": {
                "t0": {str(i): [_round(x, 4) for x in c0.get(i).centroid] for i in resolved},
                "t1": {str(i): [_round(x, 4) for x in c1.get(i).centroid] for i in new},
            },
        })

    def tool_lesion_geometry(self, mask, lesion_id) -> ToolResult:
        m = self._mask(mask)
        _, comp = self._lesion(m, lesion_id)
        out = self._lesion_summary(m, comp)
        out.update({"bbox_min": list(comp.bbox_min), "bbox_max": list(comp.bbox_max)})
        return ToolResult("ok", out)

    def tool_lesion_features(self, mask, image, lesion_id) -> ToolResult:
        m = self._mask(mask)
        img = self._image(image)
        if img.grid != m.grid.grid:
            raise ToolFailure("grid_error", "image and mask are on different grids")
        cs, comp = self._lesion(m, lesion_id)
        sel = cs.labeling == comp.id
        vol_mm3 = comp.voxel_count * m.grid.voxel_volume_mm3
        area = surface_area(sel, m.grid.spacing)
        pts = m.grid.grid.index_to_world(np.argwhere(sel))
        values = img.data[sel].astype(np.float64)
        record = self._lesion_summary(m, comp)
        record.update({
            "bbox_min": list(comp.bbox_min),
            "bbox_max": list(comp.bbox_max),
            "lobe": self._lobe(m, sel)[0] if atlas.atlas_of_grid(m.grid.grid) else None,
            "features": {
                "surface_area_mm2": _round(area),
                "sphericity": _round(sphericity(vol_mm3, area)),
                "elongation": _round(elongation(pts)),
                "mean_intensity": _round(values.mean()),
                "max_intensity": _round(values.max()),
            },
        })
        return ToolResult("ok", record)

    def _lobe(self, mask: LabelMask, sel: np.ndarray):
        lobes = atlas.lobe_index(atlas.world_points(mask.grid.grid))[sel]
        counts = np.bincount(lobes, minlength=len(LOBES) + 1)[1:]
        best = int(np.argmax(counts))  # argmax takes the lowest id on ties
        return LOBES[best + 1], counts[best] / sel.sum()

    def tool_localize(self, mask, lesion_id) -> ToolResult:
        m = self._mask(mask)
        if atlas.atlas_of_grid(m.grid.grid) is None:
            raise ToolFailure("precondition_failed", "mask is not in an atlas space", check="space")
        cs, comp = self._lesion(m, lesion_id)
        lobe, fraction = self._lobe(m, cs.labeling == comp.id)
        return ToolResult("ok", {"lesion_id": comp.id, "lobe": lobe, "overlap_fraction": _round(fraction)})

    def tool_visualize(self, image, mask=None) -> ToolResult:
        img = self._image(image)
        z = img.dims[2] // 2
        plane = img.data[:, :, z].astype(np.float64)
        peak = plane.max()
        pixels = np.zeros(plane.shape, dtype=np.uint8) if peak <= 0 else np.clip(
            np.floor(plane / peak * 254), 0, 254).astype(np.uint8)
        if mask is not None:
            m = self._mask(mask)
            if m.grid.grid != img.grid:
                raise ToolFailure("grid_error", "image and mask are on different grids")
            pixels[m.data[:, :, z] != 0] = 255
        rows = pixels.T  # rows = y, columns = x
        if self.output_dir is None:
            self.output_dir = Path(tempfile.mkdtemp(prefix="workbench_"))
        rel = self._out_path(f"outputs/{self.case.case_id}/viz_{len(self.store) + 1}.pgm")
        path = self.output_dir / rel
        path.write_bytes(f"P5\n{rows.shape[1]} {rows.shape[0]}\n255\n".encode() + rows.tobytes())
        return ToolResult("ok", {"path": str(path), "width": int(rows.shape[1]),
                                 "height": int(rows.shape[0]), "slice": z})


def iou_matrix(lab0: np.ndarray, n0: int, lab1: np.ndarray, n1: int) -> np.ndarray:
    """Pairwise IoU between components of two labelings on the same grid, shape (n0, n1)."""
    if n0 == 0 or n1 == 0:
        return np.zeros((n0, n1))
    pair = lab0.astype(np.int64) * (n1 + 1) + lab1.astype(np.int64)
    inter = np.bincount(pair.ravel(), minlength=(n0 + 1) * (n1 + 1)).reshape(n0 + 1, n1 + 1)[1:, 1:]
    size0 = np.bincount(lab0.ravel(), minlength=n0 + 1)[1:]
    size1 = np.bincount(lab1.ravel(), minlength=n1 + 1)[1:]
    union = size0[:, None] + size1[None, :] - inter
    return inter / union


def greedy_match(iou: np.ndarray, threshold: float) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching by descending IoU; ties broken by (id_t0, id_t1)."""
    candidates = sorted(
        ((float(iou[i, j]), i + 1, j + 1) for i in range(iou.shape[0]) for j in range(iou.shape[1])
         if iou[i, j] > 0 and iou[i, j] >= threshold),
        key=lambda c: (-c[0], c[1], c[2]),
    )
    used0, used1, pairs = set(), set(), []
    for v, a, b in candidates:
        if a in used0 or b in used1:
            continue
        used0.add(a)
        used1.add(b)
        pairs.append((a, b, v))
    return sorted(pairs)


def tool_descriptor(name: str) -> ToolDescriptor:
    for d in TOOL_DESCRIPTORS:
        if d.name == name:
            return d
    raise KeyError(name)


def observation_text(name: str, result: ToolResult) -> str:
    return json.dumps({"tool": name, **result.to_dict()}, sort_keys=True, separators=(",", ":"))
