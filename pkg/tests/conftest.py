import numpy as np
import pytest

from cutoseen.cut_geometry import circle_level_set
from cutoseen.forms import discretize
from cutoseen.mesh import build_structured_mesh


@pytest.fixture(scope="session")
def circle_disc_p1():
    mesh = build_structured_mesh(10, 10)
    return discretize(mesh, circle_level_set(mesh, (0.5123, 0.4987), 0.4), 1)


@pytest.fixture(scope="session")
def circle_disc_p2():
    mesh = build_structured_mesh(8, 8)
    return discretize(mesh, circle_level_set(mesh, (0.5123, 0.4987), 0.4), 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
