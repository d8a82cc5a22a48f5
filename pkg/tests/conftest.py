import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from neuroworkbench.benchmark.phantom import generate_phantom  # noqa: E402
from neuroworkbench.benchmark.suite import generate_suite, sample_case  # noqa: E402
from neuroworkbench.benchmark.dataset import save_dataset  # noqa: E402


@pytest.fixture(scope="session")
def make_case(tmp_path_factory):
    """Build and write a sampled phantom case; cached per argument tuple."""
    cache = {}

    def factory(pathology="glioma", preprocessed=True, timepoints=1, n_lesions=1, seed=0):
        key = (pathology, preprocessed, timepoints, n_lesions, seed)
        if key not in cache:
            rng = np.random.default_rng([seed, 99])
            spec = sample_case(f"x{len(cache):02d}", pathology, timepoints, preprocessed, rng, n_lesions)
            root = tmp_path_factory.mktemp("case")
            cache[key] = generate_phantom(spec, root)
        return cache[key]

    return factory


@pytest.fixture(scope="session")
def small_suite(tmp_path_factory):
    """The small profile with volumes on disk."""
    ds = generate_suite("small", seed=0)
    root = tmp_path_factory.mktemp("small")
    save_dataset(ds, root, write_volumes=True)
    return ds, root


@pytest.fixture(scope="session")
def tiny_suite(tmp_path_factory):
    ds = generate_suite("tiny", seed=0)
    root = tmp_path_factory.mktemp("tiny")
    save_dataset(ds, root, write_volumes=True)
    return ds, root


# -- acceptance reporting: one PASS/FAIL line per criterion ------------------------------

_CRITERIA: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    n, title = marker.args
    ok = report.passed and _CRITERIA.get(n, (title, True))[1]
    _CRITERIA[n] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}")
