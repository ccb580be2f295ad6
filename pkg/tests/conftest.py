import numpy as np
import pytest
from hypothesis import settings

from dtmxai import engine

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def small_net(cam_relu=True):
    """Two-conv network small enough for exhaustive finite differences."""
    layers = [
        engine.Conv3d(1, 3, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
        engine.ReLU(),
        engine.MaxPool3d((2, 2, 2), (2, 2, 2)),
        engine.Conv3d(3, 4, (3, 3, 3), (1, 1, 1), (1, 1, 1), cam_target=True),
    ]
    if cam_relu:
        layers.append(engine.ReLU())
    layers += [engine.GlobalAvgPool(), engine.Dense(4, 1)]
    return engine.NetworkSpec(tuple(layers))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")
    config._acceptance = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when == "teardown":
        return
    number, title = marker.args
    results = item.config._acceptance
    failed = call.excinfo is not None
    if call.when == "setup" and not failed:
        return
    prev = results.get(number, (title, True, 0.0))
    results[number] = (title, prev[1] and not failed, prev[2] + call.duration)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, secs = results[number]
        terminalreporter.write_line(
            f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title} ({secs:.1f} s)")
