import numpy as np
import pytest
from hypothesis import settings

from loctomo.forward import PhantomSpec, make_phantom, project, tilt_angles
from loctomo.geometry import DetectorSpec

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_phantom():
    return make_phantom(PhantomSpec("spheres", (24, 24, 24), count=5, seed=1))


@pytest.fixture(scope="session")
def small_series(small_phantom):
    return project(small_phantom, tilt_angles(-60, 60, 10), DetectorSpec(24, 24))
