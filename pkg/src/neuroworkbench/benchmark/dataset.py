"""Dataset files: ``dataset.jsonl`` (manifest line, then one item per line) and ``cases.jsonl``.

Records are written with sorted keys so save/load/save is byte-identical,
and fields this version does not know are carried through untouched.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from ..backends.scripted import STEP_KINDS, PlanStep
from ..volume import FormatError as _VolumeFormatError
from .phantom import PhantomSpec, generate_phantom
from .suite import BenchmarkItem, Dataset, ExpectedField

SCHEMA_VERSION = 1
DATASET_FILE = "dataset.jsonl"
CASES_FILE = "cases.jsonl"

_ITEM_KEYS = ("item_id", "tier", "template", "question", "case", "timepoints", "expected_plans", "expected_answer")
_MANIFEST_KEYS = ("record", "schema_version", "seed", "profile", "item_count", "cases_file")


class FormatError(_VolumeFormatError):
    def __init__(self, line: int, field: str, message: str):
        super().__init__(f"line {line}: field {field!r}: {message}")
        self.line = line
        self.field = field


def _dump(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def manifest_record(ds: Dataset) -> dict:
    d = {
        "record": "manifest",
        "schema_version": SCHEMA_VERSION,
        "seed": ds.seed,
        "profile": ds.profile,
        "item_count": len(ds.items),
        "cases_file": CASES_FILE,
    }
    d.update(ds.extra_manifest)
    return d


def dumps_items(ds: Dataset) -> str:
    lines = [_dump(manifest_record(ds))]
    lines += [_dump(item.to_dict()) for item in sorted(ds.items, key=lambda i: i.item_id)]
    return "\n".join(lines) + "\n"


def dumps_cases(ds: Dataset) -> str:
    return "".join(_dump(ds.cases[c].to_dict()) + "\n" for c in sorted(ds.cases))


def save_dataset(ds: Dataset, path: str | Path, write_volumes: bool = False) -> Path:
    """Write the dataset directory; volumes are rendered only when asked."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / DATASET_FILE).write_text(dumps_items(ds), encoding="utf-8")
    (root / CASES_FILE).write_text(dumps_cases(ds), encoding="utf-8")
    if write_volumes:
        for case_id in sorted(ds.cases):
            generate_phantom(ds.cases[case_id], root)
    return root


def _require(d: dict, key: str, kind, line: int):
    if key not in d:
        raise FormatError(line, key, "missing")
    value = d[key]
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise FormatError(line, key, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def _parse_item(d: Any, line: int) -> BenchmarkItem:
    if not isinstance(d, dict):
        raise FormatError(line, "<record>", "expected an object")
    item_id = _require(d, "item_id", str, line)
    tier = _require(d, "tier", int, line)
    if tier not in (1, 2, 3):
        raise FormatError(line, "tier", f"must be 1, 2 or 3, got {tier}")
    question = _require(d, "question", str, line)
    case = _require(d, "case", str, line)
    plans_raw = _require(d, "expected_plans", dict, line)
    answer_raw = _require(d, "expected_answer", list, line)
    if not answer_raw:
        raise FormatError(line, "expected_answer", "must list at least one field")
    plans = {}
    for topo, steps in plans_raw.items():
        if not isinstance(steps, list) or not steps:
            raise FormatError(line, f"expected_plans.{topo}", "must be a nonempty list")
        try:
            plans[topo] = [PlanStep.from_dict(s) for s in steps]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(line, f"expected_plans.{topo}", f"bad step: {exc}") from None
        if plans[topo][-1].kind != "FinalAnswer":
            raise FormatError(line, f"expected_plans.{topo}", "must end in FinalAnswer")
    answer = []
    for k, f in enumerate(answer_raw):
        try:
            answer.append(ExpectedField.from_dict(f))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(line, f"expected_answer[{k}]", f"bad field: {exc}") from None
    timepoints = d.get("timepoints", [0])
    if not isinstance(timepoints, list):
        raise FormatError(line, "timepoints", "expected a list")
    extra = {k: v for k, v in d.items() if k not in _ITEM_KEYS}
    return BenchmarkItem(item_id, tier, d.get("template", ""), question, case, timepoints, plans, answer, extra)


def loads_dataset(text: str, cases_text: str | None = None) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise FormatError(1, "record", "empty dataset file")
    try:
        manifest = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(1, "<record>", f"invalid JSON: {exc.msg}") from None
    if not isinstance(manifest, dict) or manifest.get("record") != "manifest":
        raise FormatError(1, "record", "first line must be the manifest record")
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise FormatError(1, "schema_version", f"unsupported version {version!r}")
    items = []
    for n, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            d = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise FormatError(n, "<record>", f"invalid JSON: {exc.msg}") from None
        items.append(_parse_item(d, n))
    cases = {}
    for n, raw in enumerate((cases_text or "").splitlines(), start=1):
        if raw.strip():
            try:
                spec = PhantomSpec.from_dict(json.loads(raw))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(n, "case", f"bad case record: {exc}") from None
            cases[spec.case_id] = spec
    extra = {k: v for k, v in manifest.items() if k not in _MANIFEST_KEYS}
    return Dataset(items, cases, manifest.get("seed", 0), manifest.get("profile", "custom"), extra)


def load_dataset(path: str | Path) -> Dataset:
    """Load a dataset directory (or a bare ``dataset.jsonl`` path)."""
    p = Path(path)
    root = p if p.is_dir() else p.parent
    data_file = root / DATASET_FILE if p.is_dir() else p
    cases_file = root / CASES_FILE
    text = data_file.read_text(encoding="utf-8")
    cases_text = cases_file.read_text(encoding="utf-8") if cases_file.exists() else None
    return loads_dataset(text, cases_text)
