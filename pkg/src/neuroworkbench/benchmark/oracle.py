"""Reference measurements taken directly on phantom ground truth.

Deliberately independent of :mod:`neuroworkbench.toolbox` and of the
connected-component code in :mod:`neuroworkbench.volume`: lesions are read
from the instance masks the phantom renderer produced, voxel by voxel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import atlas
from ..atlas import LOBES
from .phantom import GroundTruth, render_modality


@dataclass(frozen=True)
class OracleLesion:
    id: int  # rank by (-voxel count, rounded centroid)
    source: int  # index into PhantomSpec.lesions
    voxels: tuple[tuple[int, int, int], ...]
    volume_mm3: float
    centroid: tuple[float, float, float]


def _centroid(grid, voxels) -> tuple[float, float, float]:
    n = len(voxels)
    mean_idx = [sum(v[a] for v in voxels) / n for a in range(3)]
    world = grid.affine[:, :3] @ np.array(mean_idx) + grid.affine[:, 3]
    return tuple(float(c) for c in world)


def lesions(gt: GroundTruth, tp: int) -> list[OracleLesion]:
    grid = gt.lesions[tp].grid.grid
    inst = gt.lesions[tp].data
    voxel_mm3 = float(np.prod(grid.spacing))
    found = []
    for k, source in enumerate(gt.instance_sources[tp], start=1):
        voxels = tuple(tuple(int(c) for c in v) for v in np.argwhere(inst == k))
        found.append((source, voxels))
    ranked = sorted(
        found, key=lambda sv: (-len(sv[1]), tuple(round(c, 6) for c in _centroid(grid, sv[1])))
    )
    return [
        OracleLesion(i, source, voxels, len(voxels) * voxel_mm3, _centroid(grid, voxels))
        for i, (source, voxels) in enumerate(ranked, start=1)
    ]


def total_volume(gt: GroundTruth, tp: int) -> float:
    return sum(l.volume_mm3 for l in lesions(gt, tp))


def lobe(gt: GroundTruth, lesion: OracleLesion) -> tuple[str, float]:
    grid = gt.lesions[0].grid.grid
    pts = grid.index_to_world(np.array(lesion.voxels, dtype=float))
    ids = atlas.lobe_index(pts)
    counts = {k: int(np.sum(ids == k)) for k in LOBES}
    best = max(sorted(counts), key=lambda k: (counts[k], -k))
    return LOBES[best], counts[best] / len(lesion.voxels)


def surface_area(voxels, spacing) -> float:
    """Exposed-face area by visiting each voxel's six neighbours."""
    occupied = set(voxels)
    sx, sy, sz = spacing
    area = {0: sy * sz, 1: sx * sz, 2: sx * sy}
    total = 0.0
    for v in voxels:
        for axis in range(3):
            for step in (-1, 1):
                n = list(v)
                n[axis] += step
                if tuple(n) not in occupied:
                    total += area[axis]
    return total


def features(gt: GroundTruth, tp: int, lesion: OracleLesion, modality: str = "flair") -> dict:
    grid = gt.lesions[tp].grid.grid
    v = lesion.volume_mm3
    a = surface_area(lesion.voxels, grid.spacing)
    pts = grid.index_to_world(np.array(lesion.voxels, dtype=float))
    if len(pts) < 2:
        elong = 1.0
    else:
        centred = pts - pts.mean(axis=0)
        cov = centred.T @ centred / len(pts)
        eig = sorted(np.linalg.eigh(cov)[0])
        elong = 1.0 if eig[-1] <= 0 else math.sqrt(max(eig[0], 0.0) / eig[-1])
    intens = render_modality(gt.spec, tp, modality, pts, with_skull=False).astype(float)
    return {
        "surface_area_mm2": a,
        "sphericity": math.pi ** (1 / 3) * (6 * v) ** (2 / 3) / a,
        "elongation": elong,
        "mean_intensity": float(intens.mean()),
        "max_intensity": float(intens.max()),
    }


def iou(a: OracleLesion, b: OracleLesion) -> float:
    sa, sb = set(a.voxels), set(b.voxels)
    union = len(sa | sb)
    return len(sa & sb) / union if union else 0.0


def correspondence(gt: GroundTruth, t0: int, t1: int):
    """Pairs/new/resolved by phantom lesion identity (which spec lesion each instance renders)."""
    l0 = {l.source: l for l in lesions(gt, t0)}
    l1 = {l.source: l for l in lesions(gt, t1)}
    pairs = sorted((l0[s].id, l1[s].id, iou(l0[s], l1[s])) for s in l0.keys() & l1.keys())
    new = sorted(l1[s].id for s in l1.keys() - l0.keys())
    resolved = sorted(l0[s].id for s in l0.keys() - l1.keys())
    return pairs, new, resolved


def region_volume(gt: GroundTruth, label_id: int) -> float:
    grid = gt.anatomy.grid.grid
    return int(np.sum(gt.anatomy.data == label_id)) * float(np.prod(grid.spacing))


def brain_volume(gt: GroundTruth) -> float:
    grid = gt.brain_mask.grid.grid
    return int(np.sum(gt.brain_mask.data != 0)) * float(np.prod(grid.spacing))
