import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from ugot.core import Camera, GaussianPrimitive, Scene


def random_scene(n, seed, background=(0.1, 0.2, 0.3), scale=(0.05, 0.25), opacity=(0.2, 0.8)):
    rng = np.random.default_rng(seed)
    gs = []
    for _ in range(n):
        q = Rotation.random(random_state=int(rng.integers(1 << 31))).as_quat()  # x, y, z, w
        gs.append(GaussianPrimitive(rng.uniform([-1, -1, -0.5], [1, 1, 1.5]),
                                    rng.uniform(*scale, 3), np.r_[q[3], q[:3]],
                                    rng.uniform(0, 1, 3), rng.uniform(*opacity)))
    return Scene(gs, background)


def front_camera(size=32, **kw):
    return Camera.look_at((0.0, 0.0, -4.0), (0.0, 0.0, 0.3), focal=1.1 * size,
                          principal_point=(size / 2, size / 2), width=size, height=size, **kw)


def axis_camera(width=16, height=16, focal=100.0, **kw):
    """Identity pose: camera space equals world space."""
    return Camera(np.eye(3), np.zeros(3), focal, (width / 2, height / 2), width, height, **kw)


@pytest.fixture
def cam32():
    return front_camera(32)


@pytest.fixture
def scene200():
    return random_scene(200, 0)


ACCEPTANCE_LINES = []


def report(line):
    """Record one acceptance verdict; echoed at the end of the pytest run."""
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
