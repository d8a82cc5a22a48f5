import math

import numpy as np
import pytest

from neuroworkbench import atlas
from neuroworkbench.atlas import ATLAS_GRIDS
from neuroworkbench.nifti import read_volume
from neuroworkbench.toolbox import TOOL_DESCRIPTORS, Toolbox, greedy_match
from neuroworkbench.volume import GridSpec, LabelMask, VoxelVolume, compare_headers

from oracles import flood_fill, optimal_pairing, voxel_iou

SRI = ATLAS_GRIDS["SRI24"]


def toolbox(case):
    bundle, gt = case
    return Toolbox(bundle, gt)


def put_mask(tb, data, grid=SRI, meta=None):
    data = np.asarray(data, dtype=np.uint8)
    m = LabelMask.from_array(data, grid.affine, {k: f"l{k}" for k in range(1, int(data.max(initial=0)) + 1)},
                             meta or {"space": "SRI24"})
    return tb.store.issue("mask", "test", m).id


def put_image(tb, data, grid=SRI):
    return tb.store.issue("image", "test", VoxelVolume(np.asarray(data), grid.affine, {"tp": "0"})).id


def index_of(grid, world):
    return tuple(int(round(v)) for v in (np.asarray(world) - grid.affine[:, 3]) / np.diag(grid.affine[:, :3]))


def four(tb, bundle, tp=0):
    return {m: tb.call("load_image", {"path": bundle.path(tp, m)}).payload["image"] for m in atlas.MODALITIES}


# -- loading and preprocessing -------------------------------------------------


def test_load_image(make_case):
    bundle, gt = make_case()
    tb = toolbox((bundle, gt))
    r = tb.call("load_image", {"path": bundle.path(0, "t1")})
    assert r.ok and len(r.handles) == 1
    assert tb.call("load_image", {"path": bundle.path(0, "t1") + "x"}).error_kind == "not_found"
    ids = four(tb, bundle)
    assert len(set(ids.values())) == 4


def test_skull_strip_volume_and_idempotence(make_case):
    bundle, gt = make_case()
    tb = toolbox((bundle, gt))
    r = tb.call("skull_strip", {"image": bundle.path(0, "t1")})
    # independent count of voxel centres inside the brain ellipsoid
    pts = atlas.world_points(SRI)
    inside = (((pts - atlas.BRAIN_CENTER) / atlas.BRAIN_RADII) ** 2).sum(-1) <= 1.0
    assert r.payload["brain_volume_mm3"] == float(inside.sum())
    again = tb.call("skull_strip", {"image": r.payload["image"]})
    _, a = tb.store.get(r.payload["image"])
    _, b = tb.store.get(again.payload["image"])
    assert np.array_equal(a.data, b.data)
    m = put_mask(tb, np.zeros(SRI.dims))
    assert tb.call("skull_strip", {"image": m}).error_kind == "wrong_kind"


def test_register_and_verify(make_case):
    bundle, gt = make_case(preprocessed=False)
    tb = toolbox((bundle, gt))
    native = bundle.path(0, "t1")
    v = tb.call("verify_registration", {"image": native, "reference": "atlas:SRI24"})
    assert v.ok and v.payload["equal"] is False
    fields = {m["field"].split(".")[0] for m in v.payload["mismatches"]}
    assert fields & {"origin", "dims", "spacing"}
    reg = tb.call("register", {"image": native, "target": "atlas:SRI24"})
    _, out = tb.store.get(reg.payload["image"])
    assert out.grid == SRI and compare_headers(out, SRI).equal
    v2 = tb.call("verify_registration", {"image": reg.payload["image"], "reference": "atlas:SRI24"})
    assert v2.payload["equal"] is True


def test_register_identity_in_atlas(make_case):
    bundle, gt = make_case()
    tb = toolbox((bundle, gt))
    src = tb.call("load_image", {"path": bundle.path(0, "flair")}).payload["image"]
    reg = tb.call("register", {"image": src, "target": "atlas:SRI24"}).payload["image"]
    assert np.array_equal(tb.store.get(src)[1].data, tb.store.get(reg)[1].data)
    ids = four(tb, bundle)
    ok = tb.call("verify_registration", {"image": ids["t1"], "reference": ids["flair"]})
    assert ok.payload["equal"] is True


# -- segmentation -----------------------------------------------------------------


def test_segment_pathology_passthrough(make_case):
    bundle, gt = make_case()
    tb = toolbox((bundle, gt))
    r = tb.call("segment_pathology", {**four(tb, bundle), "model": "glioma"})
    assert r.ok
    _, m = tb.store.get(r.payload["mask"])
    assert np.array_equal(m.data, gt.subregions[0].data)
    assert r.payload["labels"] == {str(k): v for k, v in atlas.PATHOLOGY_MODELS["glioma"]["labels"].items()}


def test_segment_requires_atlas_space(make_case):
    bundle, gt = make_case(preprocessed=False)
    tb = toolbox((bundle, gt))
    ids = {m: tb.call("skull_strip", {"image": p}).payload["image"] for m, p in bundle.files[0].items()}
    r = tb.call("segment_pathology", {**ids, "model": "glioma"})
    assert r.error_kind == "precondition_failed" and r.payload["check"] == "space"


def test_wrong_model_gives_empty_mask(make_case):
    bundle, gt = make_case("metastasis", n_lesions=2)
    tb = toolbox((bundle, gt))
    r = tb.call("segment_pathology", {**four(tb, bundle), "model": "glioma"})
    assert r.ok
    assert tb.call("enumerate_lesions", {"mask": r.payload["mask"]}).payload["lesion_count"] == 0


def test_enumerate_matches_configured_count(make_case):
    bundle, gt = make_case("metastasis", n_lesions=3)
    tb = toolbox((bundle, gt))
    r = tb.call("segment_pathology", {**four(tb, bundle), "model": "metastasis"})
    count = tb.call("enumerate_lesions", {"mask": r.payload["mask"]}).payload["lesion_count"]
    assert count == sum(1 for l in gt.spec.lesions if l.present(0)) == 3


def test_segment_anatomy(make_case, tmp_path):
    bundle, gt = make_case()
    tb = Toolbox(bundle, gt, output_dir=tmp_path)
    img = tb.call("skull_strip", {"image": bundle.path(0, "t1")}).payload["image"]
    r = tb.call("segment_anatomy", {"image": img})
    assert r.ok and len(r.handles) == 2 and r.payload["region_count"] == 32
    total = sum(row["volume_mm3"] for row in r.payload["regions"])
    assert total == float(np.count_nonzero(gt.brain_mask.data))
    assert read_volume(tmp_path / r.payload["output_files"][0]).dims == SRI.dims
    assert tb.call("segment_anatomy", {"image": r.payload["mask"]}).error_kind == "wrong_kind"


def test_list_labels(make_case):
    tb = toolbox(make_case())
    assert len(tb.call("list_labels", {"scope": "anatomy"}).payload["labels"]) == 32
    assert len(tb.call("list_labels", {"scope": "lobes"}).payload["labels"]) == 6
    assert tb.call("list_labels", {"scope": "spine"}).error_kind == "bad_argument"


# -- analysis ----------------------------------------------------------------------


def test_enumerate_simple(make_case):
    tb = toolbox(make_case())
    assert tb.call("enumerate_lesions", {"mask": put_mask(tb, np.zeros(SRI.dims))}).payload["lesion_count"] == 0
    g2 = GridSpec.from_spacing((8, 8, 8), (2, 2, 2))
    d = np.zeros((8, 8, 8))
    d[1, 1, 0:5] = 1
    d[1, 2, 0:5] = 1
    r = tb.call("enumerate_lesions", {"mask": put_mask(tb, d, g2)}).payload
    assert r["lesion_count"] == 1 and r["lesions"][0]["volume_mm3"] == 80.0


def test_enumerate_two_ellipsoids(make_case):
    tb = toolbox(make_case())
    pts = atlas.world_points(SRI)
    a = atlas.ellipsoid_radius(pts, (-6, 5, 3), (3, 2.5, 2)) <= 1
    b = atlas.ellipsoid_radius(pts, (6, -5, -3), (2, 3, 2.5)) <= 1
    r = tb.call("enumerate_lesions", {"mask": put_mask(tb, a | b)}).payload
    comps = flood_fill(a | b, 26)
    assert r["lesion_count"] == len(comps) == 2
    assert sorted(l["volume_mm3"] for l in r["lesions"]) == sorted(float(len(c)) for c in comps)


def test_match_identical_and_new(make_case):
    tb = toolbox(make_case())
    d = np.zeros(SRI.dims)
    d[5:8, 5:8, 5:8] = 1
    d[20:23, 20:23, 20:23] = 1
    r = tb.call("match_lesions", {"mask_t0": put_mask(tb, d), "mask_t1": put_mask(tb, d)}).payload
    assert all(p["iou"] == 1.0 for p in r["pairs"]) and len(r["pairs"]) == 2
    assert r["new"] == [] and r["resolved"] == []
    d1 = d.copy()
    d1[12:16, 30:34, 10:14] = 1  # 64 voxels, becomes lesion 1
    r = tb.call("match_lesions", {"mask_t0": put_mask(tb, d), "mask_t1": put_mask(tb, d1)}).payload
    assert r["new"] == [1] and r["resolved"] == [] and len(r["pairs"]) == 2
    assert "1" in r["unmatched_centroids"]["t1"]


def test_match_offset_cube_half_iou(make_case):
    tb = toolbox(make_case())
    a = np.zeros(SRI.dims)
    b = np.zeros(SRI.dims)
    a[10:13, 10:13, 10:13] = 1
    b[10:13, 10:13, 11:14] = 1
    r = tb.call("match_lesions", {"mask_t0": put_mask(tb, a), "mask_t1": put_mask(tb, b), "threshold": 0.25})
    assert r.payload["pairs"] == [{"id_t0": 1, "id_t1": 1, "iou": 0.5}]
    assert voxel_iou(set(map(tuple, np.argwhere(a))), set(map(tuple, np.argwhere(b)))) == 0.5


def test_greedy_matches_optimal_on_random_separated():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n0, n1 = rng.integers(1, 5, 2)
        iou = np.zeros((n0, n1))
        # well-separated lesions overlap at most one counterpart
        perm = rng.permutation(max(n0, n1))
        for i in range(n0):
            j = perm[i]
            if j < n1 and rng.random() < 0.7:
                iou[i, j] = rng.uniform(0.3, 0.95)
        got = {(a, b) for a, b, _ in greedy_match(iou, 0.25)}
        assert got == optimal_pairing(iou, 0.25)


def test_features_unit_voxel(make_case):
    tb = toolbox(make_case())
    d = np.zeros(SRI.dims)
    d[10, 10, 10] = 1
    img = put_image(tb, np.full(SRI.dims, 37.0, np.float32))
    r = tb.call("lesion_features", {"mask": put_mask(tb, d), "image": img, "lesion_id": 1}).payload
    f = r["features"]
    assert r["volume_mm3"] == 1.0 and f["surface_area_mm2"] == 6.0
    assert f["sphericity"] == pytest.approx(math.pi ** (1 / 3) * 6 ** (2 / 3) / 6, abs=1e-6)
    assert f["sphericity"] == pytest.approx(0.806, abs=1e-3)
    assert f["mean_intensity"] == f["max_intensity"] == 37.0
    missing = tb.call("lesion_features", {"mask": put_mask(tb, d), "image": img, "lesion_id": 99})
    assert missing.error_kind == "not_found"


def test_localize(make_case):
    tb = toolbox(make_case())
    # left frontal: x < 0, y >= 0, z above the temporal plane
    d = np.zeros(SRI.dims)
    i, j, k = index_of(SRI, (-6, 5, 3))
    d[i:i + 2, j:j + 2, k:k + 2] = 1
    r = tb.call("localize", {"mask": put_mask(tb, d), "lesion_id": 1}).payload
    assert r == {"lesion_id": 1, "lobe": "Left Frontal", "overlap_fraction": 1.0}
    # ten voxels along y from -4 to 5: 6 frontal, 4 parietal
    d = np.zeros(SRI.dims)
    i, j, k = index_of(SRI, (-5, -4, 0))
    d[i, j:j + 10, k] = 1
    r = tb.call("localize", {"mask": put_mask(tb, d), "lesion_id": 1}).payload
    assert r["lobe"] == "Left Frontal" and r["overlap_fraction"] == 0.6
    native = GridSpec.from_spacing(SRI.dims, (1, 1, 1), (0, 0, 0))
    assert tb.call("localize", {"mask": put_mask(tb, d, native), "lesion_id": 1}).error_kind == "precondition_failed"


def test_visualize(make_case, tmp_path):
    bundle, gt = make_case()
    tb = Toolbox(bundle, gt, output_dir=tmp_path)
    g = GridSpec.from_spacing((4, 4, 4), (1, 1, 1))
    img = put_image(tb, np.arange(64, dtype=np.float32).reshape(4, 4, 4) + 1, g)
    d = np.zeros((4, 4, 4))
    d[1, 2, 2] = 1
    r = tb.call("visualize", {"image": img, "mask": put_mask(tb, d, g)}).payload
    assert (r["width"], r["height"], r["slice"]) == (4, 4, 2)
    raw = open(r["path"], "rb").read()
    pixels = np.frombuffer(raw.split(b"\n", 3)[3], np.uint8).reshape(4, 4)
    assert pixels[2, 1] == 255 and (pixels == 255).sum() == 1
    assert tb.call("visualize", {"image": "obj_999"}).error_kind == "bad_handle"


def test_determinism(make_case):
    bundle, gt = make_case("metastasis", n_lesions=2)
    outs = []
    for _ in range(2):
        tb = toolbox((bundle, gt))
        seg = tb.call("segment_pathology", {**four(tb, bundle), "model": "metastasis"})
        outs.append((seg.to_dict(), tb.call("enumerate_lesions", {"mask": seg.payload["mask"]}).to_dict()))
    assert outs[0] == outs[1]


def test_every_tool_returns_envelope(make_case):
    tb = toolbox(make_case())
    for d in TOOL_DESCRIPTORS:
        r = tb.call(d.name, {})
        assert not r.ok and r.error_kind in ("bad_argument", "missing_input")
    assert tb.call("nonexistent", {}).error_kind == "unknown_tool"
