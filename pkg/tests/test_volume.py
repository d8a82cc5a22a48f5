import struct

import numpy as np
import pytest

from neuroworkbench.nifti import HEADER_SIZE, VOX_OFFSET, decode_volume, encode_volume, read_volume, write_volume
from neuroworkbench.volume import (
    FormatError,
    GridSpec,
    InterpolationError,
    LabelMask,
    UnsupportedError,
    VoxelVolume,
    apply_affine,
    bbox_world,
    compare_headers,
    connected_components,
    overlap_iou,
    resample,
    translation,
)

from oracles import flood_fill


def vol(data, spacing=(1, 1, 1), origin=(0, 0, 0)):
    return VoxelVolume(np.asarray(data), GridSpec.from_spacing(np.shape(data), spacing, origin).affine)


def mask(data, spacing=(1, 1, 1)):
    data = np.asarray(data, dtype=np.uint8)
    return LabelMask.from_array(data, GridSpec.from_spacing(data.shape, spacing).affine,
                                {k: f"l{k}" for k in range(1, int(data.max(initial=0)) + 1)})


# -- NIfTI ------------------------------------------------------------------


def test_zero_volume_file_layout(tmp_path):
    v = VoxelVolume.zeros((4, 4, 4))
    p = tmp_path / "z.nii"
    write_volume(v, p)
    raw = p.read_bytes()
    assert struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE == 348
    assert struct.unpack_from("<f", raw, 108)[0] == VOX_OFFSET == 352
    assert raw[344:348] == b"n+1\x00"
    # single-file NIfTI-1: header, 4-byte extension flag, then the data
    assert len(raw) == 352 + 64
    back = read_volume(p)
    assert back.dims == (4, 4, 4) and np.count_nonzero(back.data) == 0 and back.data.size == 64


@pytest.mark.parametrize("dtype", ["uint8", "int16", "float32"])
def test_round_trip_byte_identical(tmp_path, dtype):
    rng = np.random.default_rng(3)
    data = (rng.random((5, 3, 4)) * 200).astype(dtype)
    v = VoxelVolume(data, GridSpec.from_spacing((5, 3, 4), (1.5, 2.0, 0.5), (-3, 4, 7.25), flips=(-1, 1, 1)).affine)
    write_volume(v, tmp_path / "a.nii")
    back = read_volume(tmp_path / "a.nii")
    assert back == v
    write_volume(back, tmp_path / "b.nii")
    assert (tmp_path / "a.nii").read_bytes() == (tmp_path / "b.nii").read_bytes()


def test_float32_data_section_size():
    raw = encode_volume(VoxelVolume(np.zeros((2, 2, 2), np.float32), np.eye(4)[:3]))
    assert len(raw) - VOX_OFFSET == 32


def test_truncated_data_rejected():
    raw = encode_volume(VoxelVolume(np.zeros((2, 2, 2), np.uint8), np.eye(4)[:3]))
    with pytest.raises(FormatError):
        decode_volume(raw[: VOX_OFFSET + 7])


def test_bad_magic_and_dtype_rejected():
    raw = bytearray(encode_volume(VoxelVolume.zeros((2, 2, 2))))
    bad = bytearray(raw)
    bad[344:348] = b"ni1\x00"
    with pytest.raises(FormatError):
        decode_volume(bytes(bad))
    bad = bytearray(raw)
    struct.pack_into("<h", bad, 70, 64)
    with pytest.raises(UnsupportedError):
        decode_volume(bytes(bad))


def test_oblique_affine_rejected():
    a = np.eye(4)[:3]
    a[0, 1] = 0.3
    with pytest.raises(UnsupportedError):
        VoxelVolume(np.zeros((2, 2, 2), np.uint8), a)


# -- resampling ---------------------------------------------------------------


def test_resample_identity():
    v = vol(np.arange(27, dtype=np.uint8).reshape(3, 3, 3))
    assert resample(v, (1, 1, 1), "nearest") == v


def test_resample_upsample_replicates():
    rng = np.random.default_rng(0)
    data = rng.integers(0, 100, (4, 4, 4)).astype(np.uint8)
    v = vol(data, spacing=(2, 2, 2))
    out = resample(v, (1, 1, 1), "nearest")
    assert out.dims == (8, 8, 8) and out.spacing == (1.0, 1.0, 1.0)
    for i, j, k in np.ndindex(8, 8, 8):
        assert out.data[i, j, k] == data[i // 2, j // 2, k // 2]


@pytest.mark.parametrize("spacing", [(0.5, 0.5, 0.5), (2.0, 1.0, 3.0), (0.7, 1.3, 1.0)])
def test_resample_constant_preserved(spacing):
    v = vol(np.full((5, 6, 4), 7.5, np.float32))
    for interp in ("nearest", "trilinear"):
        out = resample(v, spacing, interp)
        assert np.allclose(out.data, 7.5)


def test_resample_half_and_back_is_identity():
    rng = np.random.default_rng(1)
    v = vol(rng.integers(0, 9, (6, 5, 7)).astype(np.uint8))
    assert resample(resample(v, (0.5, 0.5, 0.5)), (1, 1, 1)) == v


def test_label_trilinear_rejected():
    with pytest.raises(InterpolationError):
        resample(mask(np.ones((2, 2, 2))), (0.5, 0.5, 0.5), "trilinear")


def test_apply_affine_identity_and_shift():
    rng = np.random.default_rng(2)
    data = rng.integers(1, 50, (4, 4, 4)).astype(np.uint8)
    v = vol(data)
    assert apply_affine(v, np.eye(4), v.grid) == v
    shifted = apply_affine(v, translation((1, 0, 0)), v.grid)
    assert np.array_equal(shifted.data[1:], data[:-1])
    assert not shifted.data[0].any()
    gone = apply_affine(v, translation((10, 0, 0)), v.grid)
    assert not gone.data.any()


# -- components and IoU -------------------------------------------------------


def test_single_voxel_component():
    d = np.zeros((5, 5, 5), np.uint8)
    d[2, 3, 4] = 1
    cs = connected_components(mask(d))
    assert cs.count == 1
    c = cs.get(1)
    assert c.centroid == (2.0, 3.0, 4.0) and c.bbox_min == c.bbox_max == (2, 3, 4)


def test_diagonal_connectivity():
    d = np.zeros((3, 3, 3), np.uint8)
    d[0, 0, 0] = d[1, 1, 1] = 1
    assert connected_components(mask(d), connectivity=26).count == 1
    assert connected_components(mask(d), connectivity=18).count == 2
    assert connected_components(mask(d), connectivity=6).count == 2


def test_two_cubes_with_gap():
    d = np.zeros((10, 5, 5), np.uint8)
    d[0:3, 0:3, 0:3] = 1
    d[5:8, 0:3, 0:3] = 1
    cs = connected_components(mask(d))
    assert cs.count == 2 and [c.voxel_count for c in cs.components] == [27, 27]


def test_component_order_size_then_centroid():
    d = np.zeros((12, 4, 4), np.uint8)
    d[9, 0, 0] = 1
    d[0, 0, 0] = 1
    d[4:6, 0, 0] = 1
    cs = connected_components(mask(d))
    assert [c.voxel_count for c in cs.components] == [2, 1, 1]
    assert cs.get(2).centroid[0] == 0.0 and cs.get(3).centroid[0] == 9.0


def test_bad_connectivity():
    with pytest.raises(ValueError):
        connected_components(mask(np.ones((2, 2, 2))), connectivity=8)


@pytest.mark.parametrize("conn", [6, 18, 26])
def test_components_match_flood_fill(conn):
    rng = np.random.default_rng(conn)
    for _ in range(40):
        dims = tuple(int(v) for v in rng.integers(1, 9, 3))
        d = (rng.random(dims) < rng.uniform(0.1, 0.5)).astype(np.uint8)
        cs = connected_components(mask(d), connectivity=conn)
        got = {frozenset(map(tuple, np.argwhere(cs.labeling == c.id).tolist())) for c in cs.components}
        assert got == set(flood_fill(d != 0, conn))


def test_centroid_inside_world_bbox():
    rng = np.random.default_rng(5)
    d = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
    m = LabelMask.from_array(d, GridSpec.from_spacing(d.shape, (1, 2, 0.5), (3, -4, 1), (-1, 1, 1)).affine, {1: "x"})
    for c in connected_components(m).components:
        lo, hi = bbox_world(m.grid.grid, c.bbox_min, c.bbox_max)
        assert np.all(np.array(c.centroid) >= lo - 1e-9) and np.all(np.array(c.centroid) <= hi + 1e-9)


def test_iou_cases():
    a = np.zeros((6, 6, 6), np.uint8)
    b = np.zeros_like(a)
    a[0:3, 0:3, 0:3] = 1
    b[0:3, 0:3, 1:4] = 1
    assert overlap_iou(mask(a), mask(b)) == 0.5  # 18 / 36
    assert overlap_iou(mask(a), mask(a)) == 1.0
    c = np.zeros_like(a)
    c[4:, 4:, 4:] = 1
    assert overlap_iou(mask(a), mask(c)) == 0.0
    assert overlap_iou(mask(np.zeros_like(a)), mask(np.zeros_like(a))) == 0.0


def test_iou_symmetric_and_bounded():
    rng = np.random.default_rng(9)
    for _ in range(30):
        a = rng.random((5, 5, 5)) < 0.4
        b = rng.random((5, 5, 5)) < 0.4
        x, y = overlap_iou(a, b), overlap_iou(b, a)
        assert x == y and 0.0 <= x <= 1.0


# -- headers --------------------------------------------------------------------


def test_compare_headers():
    a = vol(np.zeros((3, 3, 3), np.uint8))
    assert compare_headers(a, a).equal
    b = vol(np.zeros((3, 3, 3), np.uint8), spacing=(1, 1, 1.2))
    diff = compare_headers(a, b)
    assert not diff.equal and "spacing.z" in [m[0] for m in diff.mismatches]
    c = vol(np.zeros((3, 3, 3), np.uint8), origin=(1e-6, 0, 0))
    assert compare_headers(a, c).equal
