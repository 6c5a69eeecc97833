import numpy as np
import pytest

from riverspar.nets import init_params
from riverspar.world import RiverWorld, StartSpec, straight_river


@pytest.fixture(scope="session")
def world():
    return straight_river()


@pytest.fixture(scope="session")
def tiny_world():
    # 12 m straight river: cheap exhaustive checks
    return straight_river(length=12.0, width=6.0, corridor_half_width=5.0)


@pytest.fixture(scope="session")
def params():
    return init_params(0)


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(1234))


CENTER_START = StartSpec(segment_index=0, lateral_offset=0.0, z=6.0, yaw_offset=0.0)


@pytest.fixture(scope="session")
def center_start():
    return CENTER_START
