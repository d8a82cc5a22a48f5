"""Analytic brain phantoms standing in for BraTS-style multi-modal MRI cases."""

from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .. import atlas
from ..atlas import ATLAS_GRIDS, MODALITIES, PATHOLOGY_MODELS
from ..nifti import write_volume
from ..volume import GridSpec, LabelMask, VoxelVolume, translation


class SpecError(ValueError):
    pass


# Per-modality intensities: healthy tissue base and lesion sub-region contrast.
TISSUE_BASE = {"t1": 420, "t1ce": 440, "t2": 360, "flair": 380}
LESION_CONTRAST = {
    "t1": {1: 180, 2: 300, 3: 260},
    "t1ce": {1: 220, 2: 420, 3: 900},
    "t2": {1: 760, 2: 820, 3: 640},
    "flair": {1: 520, 2: 940, 3: 700},
}
SKULL_INTENSITY = 1500
NATIVE_PAD = (3, 3, 3)


@dataclass(frozen=True)
class LesionSpec:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float = 1.0
    # One entry per timepoint; None marks the lesion as absent at that timepoint.
    scales: tuple[float | None, ...] = (1.0,)

    def present(self, tp: int) -> bool:
        return self.scales[tp] is not None


@dataclass(frozen=True)
class PhantomSpec:
    case_id: str
    pathology: str
    lesions: tuple[LesionSpec, ...]
    timepoints: int = 1
    preprocessed: bool = True
    seed: int = 0
    native_offset: tuple[int, int, int] = (0, 0, 0)

    @property
    def atlas(self) -> str:
        return PATHOLOGY_MODELS[self.pathology]["atlas"]

    @property
    def grid(self) -> GridSpec:
        return ATLAS_GRIDS[self.atlas]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        lesions = tuple(
            LesionSpec(
                center=tuple(l["center"]),
                radii=tuple(l["radii"]),
                intensity=l.get("intensity", 1.0),
                scales=tuple(l["scales"]),
            )
            for l in d["lesions"]
        )
        return cls(
            case_id=d["case_id"],
            pathology=d["pathology"],
            lesions=lesions,
            timepoints=d.get("timepoints", 1),
            preprocessed=d.get("preprocessed", True),
            seed=d.get("seed", 0),
            native_offset=tuple(d.get("native_offset", (0, 0, 0))),
        )


@dataclass(frozen=True)
class CaseBundle:
    case_id: str
    pathology: str
    preprocessed: bool
    root: Path
    # files[tp][modality] -> path relative to root
    files: tuple[dict[str, str], ...]
    spec: PhantomSpec = field(repr=False, compare=False, default=None)

    @property
    def timepoints(self) -> int:
        return len(self.files)

    def path(self, tp: int, modality: str) -> str:
        return self.files[tp][modality]

    def all_paths(self) -> list[str]:
        return [p for tp in self.files for p in tp.values()]

    def resolve(self, rel: str) -> Path:
        return Path(self.root) / rel


@dataclass(frozen=True, eq=False)
class GroundTruth:
    spec: PhantomSpec
    brain_mask: LabelMask
    anatomy: LabelMask
    # Instance masks per timepoint (dense ids) and instance -> spec lesion index.
    lesions: tuple[LabelMask, ...]
    instance_sources: tuple[tuple[int, ...], ...]
    # Tumour sub-region masks per timepoint, using the pathology model vocabulary.
    subregions: tuple[LabelMask, ...]
    native_grid: GridSpec | None
    native_to_atlas: np.ndarray
    preprocessed: bool

    @property
    def atlas(self) -> str:
        return self.spec.atlas

    def atlas_points(self, grid: GridSpec, space: str) -> np.ndarray:
        """Atlas-frame world coordinates of the voxel centres of ``grid`` living in ``space``."""
        pts = atlas.world_points(grid)
        if space == "native":
            pts = pts + self.native_to_atlas[:, 3]
        return pts

    def brain_in(self, grid: GridSpec, space: str) -> np.ndarray:
        pts = self.atlas_points(grid, space)
        return atlas.ellipsoid_radius(pts, atlas.BRAIN_CENTER, atlas.BRAIN_RADII) <= 1.0

    def anatomy_in(self, grid: GridSpec, space: str) -> np.ndarray:
        if space != "native" and grid == self.anatomy.grid.grid:
            return self.anatomy.data
        return _anatomy_at(self.atlas_points(grid, space))


def _anatomy_at(points: np.ndarray) -> np.ndarray:
    """Anatomy labels evaluated at arbitrary atlas-frame points."""
    frac = (points - (np.asarray(atlas.BRAIN_CENTER) - np.asarray(atlas.BRAIN_RADII))) / (
        2 * np.asarray(atlas.BRAIN_RADII)
    )
    ybin = np.clip(np.floor(frac[..., 1] * 4), 0, 3).astype(int)
    zbin = np.clip(np.floor(frac[..., 2] * 4), 0, 3).astype(int)
    cell = ybin * 4 + zbin
    left = points[..., 0] < atlas.BRAIN_CENTER[0]
    labels = np.where(left, np.array(atlas._LEFT_CELLS)[cell], np.array(atlas._RIGHT_CELLS)[cell])
    inside = atlas.ellipsoid_radius(points, atlas.BRAIN_CENTER, atlas.BRAIN_RADII) <= 1.0
    return np.where(inside, labels, 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def lesion_radius(points: np.ndarray, lesion: LesionSpec, tp: int) -> np.ndarray:
    scale = lesion.scales[tp]
    radii = [r * scale for r in lesion.radii]
    return atlas.ellipsoid_radius(points, lesion.center, radii)


def _subregion(rho: np.ndarray) -> np.ndarray:
    return np.where(rho <= atlas.CORE_RADIUS, 1, np.where(rho <= atlas.ENHANCING_RADIUS, 3, 2))


def render_lesions(spec: PhantomSpec, tp: int, points: np.ndarray):
    """Return (instance ids, spec lesion index per instance, sub-region labels) at ``points``."""
    shape = points.shape[:-1]
    instances = np.zeros(shape, dtype=np.uint8)
    sub = np.zeros(shape, dtype=np.uint8)
    sources = []
    for k, lesion in enumerate(spec.lesions):
        if not lesion.present(tp):
            continue
        rho = lesion_radius(points, lesion, tp)
        inside = rho <= 1.0
        sources.append(k)
        instances[inside] = len(sources)
        sub[inside] = _subregion(rho[inside])
    return instances, tuple(sources), sub


def texture(points: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic integer texture keyed on rounded world position, identical in every grid."""
    q = np.rint(points).astype(np.int64)
    h = (q[..., 0] * 73856093) ^ (q[..., 1] * 19349663) ^ (q[..., 2] * 83492791) ^ (seed * 2654435761)
    return (np.abs(h) % 23).astype(np.int64)


def render_modality(spec: PhantomSpec, tp: int, modality: str, points: np.ndarray, with_skull: bool) -> np.ndarray:
    """Int16 intensities at atlas-frame ``points``."""
    anatomy = _anatomy_at(points)
    inside = anatomy > 0
    values = np.zeros(points.shape[:-1], dtype=np.int64)
    values[inside] = TISSUE_BASE[modality] + 6 * (anatomy[inside].astype(np.int64) % 9)
    instances, sources, sub = render_lesions(spec, tp, points)
    for inst, k in enumerate(sources, start=1):
        sel = instances == inst
        contrast = np.array([0, *[LESION_CONTRAST[modality][s] for s in (1, 2, 3)]])
        values[sel] = np.rint(contrast[sub[sel]] * spec.lesions[k].intensity).astype(np.int64)
    values = np.where(inside, values + texture(points, spec.seed), 0)
    if with_skull:
        pts_r = atlas.ellipsoid_radius(points, atlas.BRAIN_CENTER, [r + atlas.SKULL_THICKNESS for r in atlas.BRAIN_RADII])
        values = np.where(~inside & (pts_r <= 1.0), SKULL_INTENSITY, values)
    return values.astype(np.int16)


def native_grid(spec: PhantomSpec) -> GridSpec:
    """Scanner grid of an unprocessed case: x flipped, padded, shifted by ``-native_offset``."""
    g = spec.grid
    t = np.asarray(spec.native_offset, dtype=float)
    dims = tuple(d + 2 * p for d, p in zip(g.dims, NATIVE_PAD))
    lo = np.asarray(g.origin) - np.asarray(NATIVE_PAD) - t
    hi_x = lo[0] + dims[0] - 1
    return GridSpec.from_spacing(dims, g.spacing, (hi_x, lo[1], lo[2]), flips=(-1, 1, 1))


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def validate_spec(spec: PhantomSpec) -> None:
    if spec.pathology not in atlas.PATHOLOGIES:
        raise SpecError(f"unknown pathology {spec.pathology!r}")
    if not 1 <= spec.timepoints <= 3:
        raise SpecError("timepoints must be 1..3")
    if not spec.lesions:
        raise SpecError("a phantom needs at least one lesion")
    if spec.pathology != "metastasis" and len(spec.lesions) != 1:
        raise SpecError(f"{spec.pathology} phantoms carry exactly one primary lesion")
    grid = spec.grid
    pts = atlas.world_points(grid)
    brain = atlas.brain_mask(grid)
    inner = ndimage.binary_erosion(brain, structure=np.ones((3, 3, 3)))
    for k, lesion in enumerate(spec.lesions):
        if len(lesion.scales) != spec.timepoints:
            raise SpecError(f"lesion {k} has {len(lesion.scales)} scales for {spec.timepoints} timepoints")
        if all(s is None for s in lesion.scales):
            raise SpecError(f"lesion {k} is absent at every timepoint")
        for tp, s in enumerate(lesion.scales):
            if s is None:
                continue
            if s <= 0:
                raise SpecError("scale factors must be > 0")
            inside = lesion_radius(pts, lesion, tp) <= 1.0
            if not inside.any():
                raise SpecError(f"lesion {k} renders to no voxels at timepoint {tp}")
            if (inside & ~inner).any():
                raise SpecError(f"lesion {k} leaves the brain at timepoint {tp}")


@functools.lru_cache(maxsize=256)
def ground_truth(spec: PhantomSpec) -> GroundTruth:
    validate_spec(spec)
    grid = spec.grid
    pts = atlas.world_points(grid)
    brain = atlas.brain_mask(grid).astype(np.uint8)
    anatomy = atlas.anatomy_labels(grid)
    vocab = PATHOLOGY_MODELS[spec.pathology]["labels"]
    lesions, sources, subs = [], [], []
    for tp in range(spec.timepoints):
        inst, src, sub = render_lesions(spec, tp, pts)
        lesions.append(LabelMask.from_array(inst, grid.affine, {i: f"lesion {i}" for i in range(1, len(src) + 1)}))
        sources.append(src)
        subs.append(LabelMask.from_array(sub, grid.affine, vocab))
    return GroundTruth(
        spec=spec,
        brain_mask=LabelMask.from_array(brain, grid.affine, {1: "brain"}),
        anatomy=LabelMask.from_array(anatomy, grid.affine, atlas.ANATOMY_LABELS),
        lesions=tuple(lesions),
        instance_sources=tuple(sources),
        subregions=tuple(subs),
        native_grid=None if spec.preprocessed else native_grid(spec),
        native_to_atlas=translation(spec.native_offset),
        preprocessed=spec.preprocessed,
    )


def case_paths(spec: PhantomSpec) -> tuple[dict[str, str], ...]:
    space = spec.atlas.lower() if spec.preprocessed else "native"
    return tuple(
        {m: f"cases/{spec.case_id}/tp{tp}_{m}_{space}.nii" for m in MODALITIES}
        for tp in range(spec.timepoints)
    )


def render_scan(spec: PhantomSpec, tp: int, modality: str) -> VoxelVolume:
    if spec.preprocessed:
        grid = spec.grid
        data = render_modality(spec, tp, modality, atlas.world_points(grid), with_skull=False)
    else:
        grid = native_grid(spec)
        pts = atlas.world_points(grid) + np.asarray(spec.native_offset, dtype=float)
        data = render_modality(spec, tp, modality, pts, with_skull=True)
    return VoxelVolume(data, grid.affine)


def generate_phantom(spec: PhantomSpec, root: str | Path | None = None) -> tuple[CaseBundle, GroundTruth]:
    """Build the ground truth and, when ``root`` is given, write the four modalities per timepoint."""
    gt = ground_truth(spec)
    files = case_paths(spec)
    if root is not None:
        root = Path(root)
        for tp, per_mod in enumerate(files):
            for modality, rel in per_mod.items():
                target = root / rel
                target.parent.mkdir(parents=True, exist_ok=True)
                write_volume(render_scan(spec, tp, modality), target)
    bundle = CaseBundle(spec.case_id, spec.pathology, spec.preprocessed, Path(root or "."), files, spec)
    return bundle, gt


def bundle_for(spec: PhantomSpec, root: str | Path) -> CaseBundle:
    return CaseBundle(spec.case_id, spec.pathology, spec.preprocessed, Path(root), case_paths(spec), spec)


def spec_json(spec: PhantomSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)
