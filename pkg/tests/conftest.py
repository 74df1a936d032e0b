import numpy as np
import pytest

from helpers import *  # noqa: F401,F403
from region_transformer.pointcloud import featurize
from region_transformer.simulate import SceneSpec, generate_scene


@pytest.fixture(scope="session")
def small_scene():
    spec = SceneSpec(room=(2.0, 2.0, 1.5), objects=(2, 2), density=120.0, spacing=0.1)
    return featurize(generate_scene(spec, np.random.default_rng(7)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number, title, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
