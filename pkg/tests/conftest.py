import pytest

from carleman_mhd.grid_fields import GridSpec, build_grid
from carleman_mhd.mhd_systems import manufacture_scenario
from carleman_mhd.weights import build_distance_d


@pytest.fixture(scope="session")
def box16():
    grid, bp = build_grid(GridSpec.cube(16, 32))
    dist = build_distance_d(grid, bp)
    return grid, bp, dist


@pytest.fixture(scope="session")
def box12():
    grid, bp = build_grid(GridSpec.cube(12, 16))
    dist = build_distance_d(grid, bp)
    return grid, bp, dist


@pytest.fixture(scope="session")
def scenario16(box16):
    grid, bp, dist = box16
    return manufacture_scenario(grid, bp, dist)


@pytest.fixture(scope="session")
def scenario12(box12):
    grid, bp, dist = box12
    return manufacture_scenario(grid, bp, dist)
