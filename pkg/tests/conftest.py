import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.spatial.transform import Rotation

from craniosynth.geometry import DEFAULT_SCHEMA, LandmarkSet, TriangleMesh
from craniosynth.surrogate import icosphere

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


def random_landmarks(rng, spread=50.0):
    pts = rng.normal(0.0, spread, size=(10, 3))
    return LandmarkSet(dict(zip(DEFAULT_SCHEMA.names, pts)))


def sphere_mesh(radius=1.0, level=2, center=(0.0, 0.0, 0.0)):
    v, t = icosphere(level)
    return TriangleMesh(v * radius + np.asarray(center), t)


def unit_cube():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                  [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=float)
    t = [[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
         [1, 2, 6], [1, 6, 5], [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]]
    return TriangleMesh(v, t)


def grid_mesh(n=5, spacing=1.0):
    xs, ys = np.meshgrid(np.arange(n) * spacing, np.arange(n) * spacing)
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)
    tri = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            tri += [[a, a + 1, a + n + 1], [a, a + n + 1, a + n]]
    return TriangleMesh(v, tri)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
