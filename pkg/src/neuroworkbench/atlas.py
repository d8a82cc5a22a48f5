"""Synthetic reference space: atlas template grids, the brain ellipsoid, the
32-region anatomy partition, the 6-lobe atlas and pathology label vocabularies.

Everything here is analytic in world millimetres, so any grid can be labelled
by evaluating the definitions at its voxel centres.
"""

from __future__ import annotations

import numpy as np

from .volume import GridSpec

BRAIN_CENTER = (0.0, 0.0, 0.0)
BRAIN_RADII = (13.0, 17.0, 12.0)
SKULL_THICKNESS = 2.0

ATLAS_GRIDS = {
    "SRI24": GridSpec.from_spacing((32, 40, 32), (1, 1, 1), (-16.0, -20.0, -16.0)),
    "MNI152": GridSpec.from_spacing((34, 42, 32), (1, 1, 1), (-17.0, -21.0, -15.0)),
}

MODALITIES = ("t1", "t1ce", "t2", "flair")

# SynthSeg label ids/names; the anatomy partition assigns one per cell.
ANATOMY_LABELS = {
    2: "Left Cerebral White Matter",
    3: "Left Cerebral Cortex",
    4: "Left Lateral Ventricle",
    5: "Left Inferior Lateral Ventricle",
    7: "Left Cerebellum White Matter",
    8: "Left Cerebellum Cortex",
    10: "Left Thalamus",
    11: "Left Caudate",
    12: "Left Putamen",
    13: "Left Pallidum",
    14: "3rd Ventricle",
    15: "4th Ventricle",
    16: "Brain-Stem",
    17: "Left Hippocampus",
    18: "Left Amygdala",
    24: "CSF",
    26: "Left Accumbens Area",
    28: "Left Ventral DC",
    41: "Right Cerebral White Matter",
    42: "Right Cerebral Cortex",
    43: "Right Lateral Ventricle",
    44: "Right Inferior Lateral Ventricle",
    46: "Right Cerebellum White Matter",
    47: "Right Cerebellum Cortex",
    49: "Right Thalamus",
    50: "Right Caudate",
    51: "Right Putamen",
    52: "Right Pallidum",
    53: "Right Hippocampus",
    54: "Right Amygdala",
    58: "Right Accumbens Area",
    60: "Right Ventral DC",
}

_LEFT_CELLS = [2, 3, 4, 5, 7, 8, 10, 11, 12, 13, 17, 18, 26, 28, 14, 15]
_RIGHT_CELLS = [41, 42, 43, 44, 46, 47, 49, 50, 51, 52, 53, 54, 58, 60, 16, 24]

LOBES = {
    1: "Left Frontal",
    2: "Left Parietal",
    3: "Left Temporal",
    4: "Right Frontal",
    5: "Right Parietal",
    6: "Right Temporal",
}
TEMPORAL_FRACTION = 0.35

_GLIOMA_LABELS = {1: "necrotic tumor core", 2: "peritumoral edema", 3: "enhancing tumor"}
_BRATS_LABELS = {1: "non-enhancing tumor core", 2: "surrounding FLAIR hyperintensity", 3: "enhancing tumor"}

PATHOLOGY_MODELS = {
    "glioma": {"atlas": "SRI24", "labels": _GLIOMA_LABELS},
    "postop-glioma": {"atlas": "MNI152", "labels": {**_GLIOMA_LABELS, 4: "resection cavity"}},
    "metastasis": {"atlas": "SRI24", "labels": _BRATS_LABELS},
    "meningioma": {"atlas": "SRI24", "labels": _BRATS_LABELS},
    "pediatric": {"atlas": "SRI24", "labels": _GLIOMA_LABELS},
}
PATHOLOGIES = ("glioma", "postop-glioma", "metastasis", "meningioma")

# Lesion sub-region label by normalised ellipsoid radius.
CORE_RADIUS, ENHANCING_RADIUS = 0.35, 0.7


def world_points(grid: GridSpec) -> np.ndarray:
    """World coordinates of every voxel centre, shaped ``dims + (3,)``."""
    mesh = np.stack(np.meshgrid(*(np.arange(n) for n in grid.dims), indexing="ij"), axis=-1)
    return grid.index_to_world(mesh.reshape(-1, 3)).reshape(grid.dims + (3,))


def ellipsoid_radius(points: np.ndarray, center, radii) -> np.ndarray:
    """Normalised radius; <= 1 inside the ellipsoid."""
    d = (points - np.asarray(center, dtype=float)) / np.asarray(radii, dtype=float)
    return np.sqrt((d**2).sum(axis=-1))


def brain_mask(grid: GridSpec) -> np.ndarray:
    return ellipsoid_radius(world_points(grid), BRAIN_CENTER, BRAIN_RADII) <= 1.0


def skull_shell(grid: GridSpec) -> np.ndarray:
    pts = world_points(grid)
    outer = [r + SKULL_THICKNESS for r in BRAIN_RADII]
    return (ellipsoid_radius(pts, BRAIN_CENTER, outer) <= 1.0) & ~(
        ellipsoid_radius(pts, BRAIN_CENTER, BRAIN_RADII) <= 1.0
    )


def _fractions(points: np.ndarray) -> np.ndarray:
    lo = np.asarray(BRAIN_CENTER) - np.asarray(BRAIN_RADII)
    return (points - lo) / (2 * np.asarray(BRAIN_RADII))


def anatomy_labels(grid: GridSpec) -> np.ndarray:
    """SynthSeg-style label per voxel: 2 hemispheres x 4 (y) x 4 (z) cells inside the brain."""
    pts = world_points(grid)
    frac = _fractions(pts)
    ybin = np.clip(np.floor(frac[..., 1] * 4), 0, 3).astype(int)
    zbin = np.clip(np.floor(frac[..., 2] * 4), 0, 3).astype(int)
    cell = ybin * 4 + zbin
    left = pts[..., 0] < BRAIN_CENTER[0]
    labels = np.where(left, np.array(_LEFT_CELLS)[cell], np.array(_RIGHT_CELLS)[cell])
    labels[~brain_mask(grid)] = 0
    return labels.astype(np.uint8)


def lobe_index(points: np.ndarray) -> np.ndarray:
    """Lobe id (1..6) for world points, by fixed fractional planes of the brain box."""
    frac = _fractions(points)
    left = points[..., 0] < BRAIN_CENTER[0]
    temporal = frac[..., 2] < TEMPORAL_FRACTION
    frontal = frac[..., 1] >= 0.5
    within = np.where(temporal, 3, np.where(frontal, 1, 2))
    return np.where(left, within, within + 3)


def lobe_labels(grid: GridSpec) -> np.ndarray:
    lobes = lobe_index(world_points(grid)).astype(np.uint8)
    lobes[~brain_mask(grid)] = 0
    return lobes


def atlas_of_grid(grid: GridSpec) -> str | None:
    for name, template in ATLAS_GRIDS.items():
        if template == grid:
            return name
    return None
