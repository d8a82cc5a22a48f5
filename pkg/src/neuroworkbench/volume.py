"""Voxel grids, label masks and the geometric operations the simulated tools build on.

Volumes store their samples as a 3D numpy array indexed ``[x, y, z]`` together
with a 3x4 index-to-world affine. Only axis-aligned grids are representable:
the linear part of the affine must be a diagonal spacing matrix composed with a
signed permutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np
from scipy import ndimage

DTYPES = {"uint8": np.dtype(np.uint8), "int16": np.dtype(np.int16), "float32": np.dtype(np.float32)}
LABEL_DTYPES = ("uint8", "int16")
CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}
DEFAULT_CONNECTIVITY = 26


class VolumeError(Exception):
    """Base class for voxel-grid errors."""


class FormatError(VolumeError):
    pass


class UnsupportedError(VolumeError):
    pass


class InterpolationError(VolumeError):
    pass


class TransformError(VolumeError):
    pass


class GridError(VolumeError):
    pass


def _dtype_name(dtype: np.dtype) -> str:
    for name, dt in DTYPES.items():
        if dt == dtype:
            return name
    raise UnsupportedError(f"unsupported dtype {dtype}")


def check_axis_aligned(affine: np.ndarray) -> None:
    """Raise UnsupportedError unless the linear part is a scaled signed permutation."""
    lin = np.asarray(affine, dtype=float)[:, :3]
    nonzero = lin != 0
    if not (nonzero.sum(axis=0) == 1).all() or not (nonzero.sum(axis=1) == 1).all():
        raise UnsupportedError("affine is not axis-aligned")


@dataclass(frozen=True)
class GridSpec:
    """Grid descriptor: dimensions plus index-to-world affine, no samples."""

    dims: tuple[int, int, int]
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be a positive triple, got {self.dims}")
        affine = np.array(self.affine, dtype=np.float64)
        if affine.shape == (4, 4):
            affine = affine[:3]
        if affine.shape != (3, 4):
            raise ValueError("affine must be 3x4")
        check_axis_aligned(affine)
        affine.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def from_spacing(cls, dims, spacing, origin=(0.0, 0.0, 0.0), flips=(1, 1, 1)) -> "GridSpec":
        affine = np.zeros((3, 4))
        for axis in range(3):
            affine[axis, axis] = flips[axis] * float(spacing[axis])
            affine[axis, 3] = float(origin[axis])
        return cls(tuple(dims), affine)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(float(v) for v in np.abs(self.affine[:, :3]).sum(axis=0))

    @property
    def origin(self) -> tuple[float, float, float]:
        return tuple(float(v) for v in self.affine[:, 3])

    def affine4(self) -> np.ndarray:
        return np.vstack([self.affine, [0.0, 0.0, 0.0, 1.0]])

    def index_to_world(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=float)
        return index @ self.affine[:, :3].T + self.affine[:, 3]

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.affine, other.affine)

    def __hash__(self):
        return hash((self.dims, self.affine.tobytes()))


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    """Immutable scalar grid. ``data`` is shaped ``(nx, ny, nz)``."""

    data: np.ndarray
    affine: np.ndarray
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        _dtype_name(data.dtype)
        grid = GridSpec(data.shape, self.affine)
        if min(grid.spacing) <= 0:
            raise ValueError("spacing must be strictly positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", grid.affine)
        object.__setattr__(self, "meta", dict(self.meta))
        object.__setattr__(self, "_grid", grid)

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), dtype="uint8", meta=None):
        grid = GridSpec.from_spacing(dims, spacing, origin)
        return cls(np.zeros(grid.dims, dtype=DTYPES[dtype]), grid.affine, meta or {})

    @property
    def grid(self) -> GridSpec:
        return self._grid

    @property
    def dims(self) -> tuple[int, int, int]:
        return self._grid.dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self._grid.spacing

    @property
    def origin(self) -> tuple[float, float, float]:
        return self._grid.origin

    @property
    def dtype(self) -> str:
        return _dtype_name(self.data.dtype)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def flat(self) -> np.ndarray:
        """Samples in x-fastest order."""
        return self.data.ravel(order="F")

    def with_data(self, data: np.ndarray, meta: Mapping[str, str] | None = None) -> "VoxelVolume":
        merged = dict(self.meta)
        merged.update(meta or {})
        return VoxelVolume(data, self.affine, merged)

    def with_meta(self, **meta: str) -> "VoxelVolume":
        return self.with_data(self.data, meta)

    def __eq__(self, other):
        if not isinstance(other, VoxelVolume):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
            and dict(self.meta) == dict(other.meta)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Integer label grid plus the id -> region-name vocabulary (0 is background)."""

    grid: VoxelVolume
    vocabulary: Mapping[int, str]

    def __post_init__(self):
        if self.grid.dtype not in LABEL_DTYPES:
            raise ValueError(f"label masks need an integer dtype, got {self.grid.dtype}")
        vocab = {int(k): str(v) for k, v in sorted(self.vocabulary.items())}
        if 0 in vocab:
            raise ValueError("label 0 is reserved for background")
        present = set(np.unique(self.grid.data).tolist()) - {0}
        missing = present - set(vocab)
        if missing:
            raise ValueError(f"labels {sorted(missing)} missing from vocabulary")
        object.__setattr__(self, "vocabulary", vocab)
        if self.grid.meta.get("kind") != "label":
            object.__setattr__(self, "grid", self.grid.with_meta(kind="label"))

    @classmethod
    def from_array(cls, data, affine, vocabulary, meta=None) -> "LabelMask":
        data = np.asarray(data)
        if data.dtype not in (np.uint8, np.int16):
            data = data.astype(np.int16 if data.max(initial=0) > 255 else np.uint8)
        return cls(VoxelVolume(data, affine, meta or {}), vocabulary)

    @property
    def data(self) -> np.ndarray:
        return self.grid.data

    @property
    def dims(self):
        return self.grid.dims

    def binary(self) -> np.ndarray:
        return self.grid.data != 0

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return self.grid == other.grid and dict(self.vocabulary) == dict(other.vocabulary)

    __hash__ = None


@dataclass(frozen=True)
class Component:
    id: int
    voxel_count: int
    bbox_min: tuple[int, int, int]
    bbox_max: tuple[int, int, int]
    centroid: tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class ComponentSet:
    labeling: np.ndarray
    connectivity: int
    components: tuple[Component, ...]

    @property
    def count(self) -> int:
        return len(self.components)

    def get(self, component_id: int) -> Component:
        if not 1 <= component_id <= self.count:
            raise KeyError(component_id)
        return self.components[component_id - 1]


@dataclass(frozen=True)
class HeaderDiff:
    mismatches: tuple[tuple[str, object, object], ...]

    @property
    def equal(self) -> bool:
        return not self.mismatches


MaskLike = Union[LabelMask, VoxelVolume, np.ndarray]


def _as_volume(mask: MaskLike) -> VoxelVolume | None:
    if isinstance(mask, LabelMask):
        return mask.grid
    if isinstance(mask, VoxelVolume):
        return mask
    return None


def _binary(mask: MaskLike) -> np.ndarray:
    vol = _as_volume(mask)
    return (vol.data if vol is not None else np.asarray(mask)) != 0


def centroid_key(centroid: Sequence[float]) -> tuple[float, ...]:
    """Rounded centroid used for deterministic tie-breaking."""
    return tuple(round(float(c), 6) for c in centroid)


# ---------------------------------------------------------------------------
# Connected components and overlap
# ---------------------------------------------------------------------------


def connected_components(
    mask: LabelMask | VoxelVolume,
    foreground_label: int | str = "any",
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> ComponentSet:
    """Label connected foreground regions.

    Component ids are dense and ordered by descending voxel count, ties broken
    by the lexicographic world centroid.
    """
    if connectivity not in CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be one of 6, 18, 26; got {connectivity}")
    vol = _as_volume(mask)
    if foreground_label == "any":
        fg = vol.data != 0
    else:
        fg = vol.data == int(foreground_label)
    structure = ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])
    raw, n = ndimage.label(fg, structure=structure)
    if n == 0:
        return ComponentSet(np.zeros(vol.dims, dtype=np.int32), connectivity, ())

    flat = raw.ravel()
    counts = np.bincount(flat, minlength=n + 1)
    idx = np.nonzero(raw)
    labels = raw[idx]
    sums = np.stack([np.bincount(labels, weights=axis_idx, minlength=n + 1) for axis_idx in idx], axis=1)
    mean_index = sums[1:] / counts[1:, None]
    centroids = vol.grid.index_to_world(mean_index)
    slices = ndimage.find_objects(raw)

    order = sorted(range(n), key=lambda k: (-int(counts[k + 1]), centroid_key(centroids[k])))
    relabel = np.zeros(n + 1, dtype=np.int32)
    components = []
    for new_id, k in enumerate(order, start=1):
        relabel[k + 1] = new_id
        sl = slices[k]
        components.append(
            Component(
                id=new_id,
                voxel_count=int(counts[k + 1]),
                bbox_min=tuple(int(s.start) for s in sl),
                bbox_max=tuple(int(s.stop) - 1 for s in sl),
                centroid=tuple(float(c) for c in centroids[k]),
            )
        )
    return ComponentSet(relabel[raw], connectivity, tuple(components))


def bbox_world(grid: GridSpec, bbox_min, bbox_max) -> tuple[np.ndarray, np.ndarray]:
    corners = np.array(
        [[(bbox_min, bbox_max)[i][0], (bbox_min, bbox_max)[j][1], (bbox_min, bbox_max)[k][2]]
         for i in (0, 1) for j in (0, 1) for k in (0, 1)],
        dtype=float,
    )
    world = grid.index_to_world(corners)
    return world.min(axis=0), world.max(axis=0)


def overlap_iou(a: MaskLike, b: MaskLike) -> float:
    """Intersection over union of the nonzero voxels; 0 when both are empty."""
    va, vb = _as_volume(a), _as_volume(b)
    if va is not None and vb is not None:
        if va.grid != vb.grid:
            raise GridError("masks are on different grids")
    ba, bb = _binary(a), _binary(b)
    if ba.shape != bb.shape:
        raise GridError(f"shape mismatch {ba.shape} vs {bb.shape}")
    union = int(np.count_nonzero(ba | bb))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(ba & bb)) / union


# ---------------------------------------------------------------------------
# Headers
# ---------------------------------------------------------------------------

DEFAULT_TOLERANCES = {"dims": 0.0, "spacing": 1e-3, "origin": 1e-3, "affine": 1e-3}
_AXES = "xyz"


def compare_headers(
    a: VoxelVolume | GridSpec | LabelMask,
    b: VoxelVolume | GridSpec | LabelMask,
    tolerances: Mapping[str, float] | None = None,
) -> HeaderDiff:
    """List header fields (dims, spacing, origin, affine direction) that differ beyond tolerance."""
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    ga, gb = (_grid_of(v) for v in (a, b))
    mismatches = []
    for name, va, vb in (("dims", ga.dims, gb.dims), ("spacing", ga.spacing, gb.spacing), ("origin", ga.origin, gb.origin)):
        for axis in range(3):
            if abs(va[axis] - vb[axis]) > tol[name]:
                mismatches.append((f"{name}.{_AXES[axis]}", va[axis], vb[axis]))
    for r in range(3):
        for c in range(3):
            xa, xb = float(ga.affine[r, c]), float(gb.affine[r, c])
            if abs(xa - xb) > tol["affine"]:
                mismatches.append((f"affine[{r}][{c}]", xa, xb))
    return HeaderDiff(tuple(mismatches))


def _grid_of(v) -> GridSpec:
    if isinstance(v, GridSpec):
        return v
    if isinstance(v, LabelMask):
        return v.grid.grid
    return v.grid


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _is_label(volume) -> bool:
    return isinstance(volume, LabelMask) or volume.meta.get("kind") == "label"


def _nearest(x: np.ndarray) -> np.ndarray:
    return np.floor(np.round(x, 9) + 0.5).astype(np.int64)


def resample(volume, target_spacing, interpolation: str = "nearest"):
    """Resample onto a grid covering the same extent at ``target_spacing`` (mm per index axis).

    Output voxel ``k`` maps to source continuous index ``(k + 0.5) * r - 0.5`` with
    ``r = new / old`` spacing, so voxel extents stay aligned with the source box.
    """
    if interpolation not in ("nearest", "trilinear"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if _is_label(volume) and interpolation != "nearest":
        raise InterpolationError("label data can only be resampled with nearest interpolation")
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise ValueError("target spacing must be three positive values")
    src = volume.grid if isinstance(volume, LabelMask) else volume
    ratio = np.array(target) / np.array(src.spacing)
    new_dims = tuple(
        max(1, math.ceil(d * s / t - 1e-9)) for d, s, t in zip(src.dims, src.spacing, target)
    )
    new_affine = src.affine.copy()
    new_affine[:, :3] = src.affine[:, :3] * ratio[None, :]
    new_affine[:, 3] = src.affine[:, :3] @ (0.5 * ratio - 0.5) + src.affine[:, 3]

    coords = [(np.arange(n) + 0.5) * r - 0.5 for n, r in zip(new_dims, ratio)]
    if interpolation == "nearest":
        axes = [np.clip(_nearest(c), 0, d - 1) for c, d in zip(coords, src.dims)]
        data = src.data[np.ix_(*axes)]
    else:
        mesh = np.meshgrid(*coords, indexing="ij")
        data = ndimage.map_coordinates(
            src.data.astype(np.float64), mesh, order=1, mode="nearest"
        ).astype(np.float32)
    out = VoxelVolume(data, new_affine, src.meta)
    if isinstance(volume, LabelMask):
        return LabelMask(out, volume.vocabulary)
    return out


def _as_transform4(transform) -> np.ndarray:
    t = np.asarray(transform, dtype=float)
    if t.shape == (3, 4):
        t = np.vstack([t, [0, 0, 0, 1]])
    if t.shape != (4, 4):
        raise TransformError("transform must be 3x4 or 4x4")
    if abs(np.linalg.det(t[:3, :3])) < 1e-12:
        raise TransformError("transform is singular")
    return t


def apply_affine(volume, transform, target_grid, interpolation: str = "nearest"):
    """Map ``volume`` through a world-space ``transform`` (source -> target) onto ``target_grid``.

    Target voxels whose preimage falls outside the source grid are 0.
    """
    if interpolation not in ("nearest", "trilinear"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if _is_label(volume) and interpolation != "nearest":
        raise InterpolationError("label data can only be resampled with nearest interpolation")
    t4 = _as_transform4(transform)
    target = _grid_of(target_grid)
    src = volume.grid if isinstance(volume, LabelMask) else volume
    src4 = src.grid.affine4()
    m = np.linalg.inv(src4) @ np.linalg.inv(t4) @ target.affine4()

    mesh = np.stack(np.meshgrid(*(np.arange(n) for n in target.dims), indexing="ij"), axis=-1)
    pts = mesh.reshape(-1, 3).astype(float) @ m[:3, :3].T + m[:3, 3]
    if interpolation == "nearest":
        idx = _nearest(pts)
        inside = np.all((idx >= 0) & (idx < np.array(src.dims)), axis=1)
        flat = np.zeros(len(pts), dtype=src.data.dtype)
        sel = idx[inside]
        flat[inside] = src.data[sel[:, 0], sel[:, 1], sel[:, 2]]
    else:
        flat = ndimage.map_coordinates(
            src.data.astype(np.float64), pts.T, order=1, mode="constant", cval=0.0
        ).astype(np.float32)
    data = flat.reshape(target.dims)
    out = VoxelVolume(data, target.affine, src.meta)
    if isinstance(volume, LabelMask):
        return LabelMask(out, {k: v for k, v in volume.vocabulary.items()})
    return out


def translation(offset) -> np.ndarray:
    t = np.eye(4)
    t[:3, 3] = offset
    return t[:3]
