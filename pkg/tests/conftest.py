import numpy as np
import pytest

from satgeo import runtime, scenegen

runtime.keep_heap()


def tiny_spec():
    """16 m scene with one box, three 16x16 views: fast enough for unit tests."""
    spec = scenegen.empty_spec(name="tiny", extent_m=16.0)
    spec["boxes"] = [{"x0": -4.0, "x1": 3.0, "y0": -3.0, "y1": 4.0, "height": 5.0,
                      "color": [0.7, 0.6, 0.5], "texture": "noise"}]
    spec["cameras"] = dict(spec["cameras"], count=3, max_off_nadir_deg=15.0)
    spec["frame_scale_m"] = 10.0
    spec["sparse_points"] = {"n": 60, "pixel_noise_px": 0.5}
    return spec


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    scenegen.write_dataset(root, tiny_spec(), seed=3)
    return scenegen.load_dataset(root)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy") / "data"
    scenegen.write_dataset(root, scenegen.preset("toy-jax"), seed=0)
    return scenegen.load_dataset(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_c"):
        return
    if report.when == "call" or report.failed or report.skipped:
        _criteria.setdefault(name, report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria):
        num, _, label = name[len("test_c"):].partition("_")
        outcome = {"passed": "PASS", "failed": "FAIL"}.get(_criteria[name], _criteria[name].upper())
        terminalreporter.write_line(f"criterion {int(num):2d} {outcome:5s} {label.replace('_', ' ')}")
