import json

import numpy as np
import pytest

from neuroworkbench.agents import Topology
from neuroworkbench.atlas import ATLAS_GRIDS
from neuroworkbench.backends.scripted import ScriptedBackend
from neuroworkbench.benchmark import oracle
from neuroworkbench.benchmark.dataset import (
    DATASET_FILE,
    FormatError,
    dumps_cases,
    dumps_items,
    load_dataset,
    loads_dataset,
    save_dataset,
)
from neuroworkbench.benchmark.phantom import (
    LesionSpec,
    PhantomSpec,
    SpecError,
    bundle_for,
    generate_phantom,
    ground_truth,
    render_scan,
)
from neuroworkbench.benchmark.suite import PROFILES, build_item, generate_suite, mean_plan_lengths
from neuroworkbench.benchmark.templates import (
    TemplateError,
    aliases_for,
    comparison_for,
    fields_from_question,
    requirements,
)
from neuroworkbench.kernel import Episode
from neuroworkbench.volume import compare_headers

from oracles import flood_fill


# -- phantoms ---------------------------------------------------------------------


def test_single_glioma_phantom(tmp_path):
    spec = PhantomSpec("g", "glioma", (LesionSpec((-5.0, 4.0, 2.0), (3.5, 3.0, 3.0)),))
    bundle, gt = generate_phantom(spec, tmp_path)
    assert len(bundle.all_paths()) == 4 and all(bundle.resolve(p).exists() for p in bundle.all_paths())
    assert int(gt.lesions[0].data.max()) == 1


def test_new_lesion_at_t1():
    spec = PhantomSpec("m", "metastasis", (
        LesionSpec((-6.0, 5.0, 3.0), (2.0, 2.0, 2.0), scales=(1.0, 1.0)),
        LesionSpec((6.0, -5.0, -2.0), (2.0, 2.0, 2.0), scales=(None, 1.0)),
    ), timepoints=2)
    gt = ground_truth(spec)
    assert int(gt.lesions[1].data.max()) == int(gt.lesions[0].data.max()) + 1


def test_unprocessed_headers_differ():
    spec = PhantomSpec("n", "glioma", (LesionSpec((0.0, 3.0, 2.0), (3.0, 3.0, 3.0)),), preprocessed=False,
                       native_offset=(1, -2, 0))
    scan = render_scan(spec, 0, "t1")
    assert not compare_headers(scan, ATLAS_GRIDS["SRI24"]).equal


def test_invalid_spec_rejected():
    with pytest.raises(SpecError):
        ground_truth(PhantomSpec("bad", "glioma", (LesionSpec((40.0, 0.0, 0.0), (3.0, 3.0, 3.0)),)))


# -- templates ---------------------------------------------------------------------------


def test_requirements_grammar():
    r = requirements(["lesion_count", "lesion_2_lobe", "lesion_1_sphericity"])
    assert r.kind == "tumor" and r.seg_tps == [0] and r.localize == [2] and r.features == [1]
    r = requirements(["new_lesion_lobes_t0_t2", "volume_change_t0_t1_percent"])
    assert r.seg_tps == [0, 1, 2] and r.pairs == [(0, 2)] and r.enumerate_tps == [0, 1]
    assert requirements(["anatomy_file"]).kind == "anatomy"
    with pytest.raises(TemplateError):
        requirements(["favourite_colour"])
    with pytest.raises(TemplateError):
        requirements([f"lesion_{i}_volume_mm3" for i in range(1, 32)])


def test_comparisons_and_aliases():
    assert comparison_for("lesion_1_volume_mm3").rel_tol == 0.01
    assert comparison_for("lesion_1_centroid_x_mm").abs_tol == 1.0
    assert comparison_for("lesion_count_t0").kind == "numeric" and comparison_for("lesion_count_t0").rel_tol == 0
    assert comparison_for("model").kind == "exact"
    assert comparison_for("new_lesion_lobes_t0_t1").kind == "set"
    assert "lesion_1_volume_mm3" not in aliases_for("lesion_1_volume_mm3")


# -- items and suites ------------------------------------------------------------------------


def test_profiles():
    assert sum(q for _, q in PROFILES["default"].values()) == 875
    assert [PROFILES["default"][t][1] for t in (1, 2, 3)] == [43, 565, 267]


def test_tiny_suite(tiny_suite):
    ds, _ = tiny_suite
    assert len(ds.items) == 3 and sorted(i.tier for i in ds.items) == [1, 2, 3]
    for item in ds.items:
        assert fields_from_question(item.question) == item.fields
        for topo in Topology:
            assert item.plan(topo)[-1].kind == "FinalAnswer"


def test_tier1_plans(small_suite):
    ds, _ = small_suite
    for item in ds.by_tier(1):
        single = item.plan("single")
        assert len(single) == 2 and single[-1].kind == "FinalAnswer"
        assert single[0].name in ("segment_pathology", "segment_anatomy")
        assert len(item.plan("orchestrator")) >= len(single) + 2


def test_plan_length_ordering(small_suite):
    ds, _ = small_suite
    for item in ds.items:
        s, a, h, o = (len(item.plan(t)) for t in Topology)
        assert s <= a == h <= o
        if item.tier > 1:
            assert s < a and h < o
    means = {t: mean_plan_lengths(ds.by_tier(t)) for t in (1, 2, 3)}
    for topo in Topology:
        assert means[1][topo.value] < means[2][topo.value] < means[3][topo.value]


def test_t1_tumor_requires_preprocessed(make_case):
    bundle, _ = make_case(preprocessed=False)
    with pytest.raises(TemplateError):
        build_item("x", "t1_tumor", bundle.spec, ["model"])


def test_volume_answers_match_flood_fill(small_suite):
    ds, _ = small_suite
    checked = 0
    for item in ds.items:
        spec = ds.cases[item.case]
        gt = ground_truth(spec)
        comps = flood_fill(gt.subregions[0].data != 0, 26)
        grid = gt.subregions[0].grid.grid
        ranked = sorted(comps, key=lambda c: (-len(c), tuple(round(float(v), 6) for v in
                                                        grid.index_to_world(np.mean(sorted(c), axis=0)))))
        for f in item.expected_answer:
            if f.field.startswith("lesion_") and f.field.endswith("_volume_mm3") and "_t" not in f.field:
                k = int(f.field.split("_")[1])
                assert f.value == pytest.approx(len(ranked[k - 1]) * grid.affine[0, 0] ** 3)
                checked += 1
            if f.field in ("lesion_count", "lesion_count_t0"):
                assert f.value == len(comps)
                checked += 1
    assert checked > 5


def test_suite_deterministic():
    a, b = generate_suite("small", seed=3), generate_suite("small", seed=3)
    assert dumps_items(a) == dumps_items(b) and dumps_cases(a) == dumps_cases(b)
    assert dumps_items(generate_suite("small", seed=4)) != dumps_items(a)


def test_expected_plans_execute_without_errors(small_suite):
    ds, root = small_suite
    for item in ds.items[1::4]:
        for topo in Topology:
            res = Episode(item.question, bundle_for(ds.cases[item.case], root), topo,
                          ScriptedBackend(item.plan(topo))).run()
            assert not [e for e in res.trace if e.kind == "ToolError"], (item.item_id, topo)


def test_oracle_correspondence_matches_spec_identity():
    spec = PhantomSpec("m", "metastasis", (
        LesionSpec((-6.0, 6.0, 3.0), (2.5, 2.5, 2.5), scales=(1.0, 0.9)),
        LesionSpec((6.0, -6.0, -2.0), (2.0, 2.0, 2.0), scales=(1.0, None)),
        LesionSpec((5.0, 8.0, 4.0), (2.0, 2.0, 2.0), scales=(None, 1.0)),
    ), timepoints=2)
    gt = ground_truth(spec)
    pairs, new, resolved = oracle.correspondence(gt, 0, 1)
    assert len(pairs) == 1 and len(new) == 1 and len(resolved) == 1


# -- dataset files ------------------------------------------------------------------------------


def test_dataset_round_trip(tiny_suite, tmp_path):
    ds, root = tiny_suite
    again = load_dataset(root)
    save_dataset(again, tmp_path)
    for name in (DATASET_FILE, "cases.jsonl"):
        assert (root / name).read_bytes() == (tmp_path / name).read_bytes()
    assert [i.to_dict() for i in again.items] == [i.to_dict() for i in sorted(ds.items, key=lambda i: i.item_id)]


def test_dataset_errors_and_unknown_fields(tiny_suite):
    _, root = tiny_suite
    lines = (root / DATASET_FILE).read_text().splitlines()
    item = json.loads(lines[1])
    item["notes"] = "keep me"
    text = "\n".join([lines[0], json.dumps(item)]) + "\n"
    ds = loads_dataset(text)
    assert ds.items[0].extra == {"notes": "keep me"}
    assert '"notes":"keep me"' in dumps_items(ds)
    del item["expected_answer"]
    with pytest.raises(FormatError) as exc:
        loads_dataset("\n".join([lines[0], json.dumps(item)]))
    assert exc.value.line == 2 and exc.value.field == "expected_answer"
    with pytest.raises(FormatError):
        loads_dataset(lines[1])
    with pytest.raises(FormatError):
        loads_dataset(lines[0] + "\n{oops")
