import numpy as np
import pytest

from tubewave.core import CrossSection, Params, TubeGrid
from tubewave.eigen import phi_via_rescaled_flow


@pytest.fixture(scope="session")
def p4():
    return Params(4.0)


@pytest.fixture(scope="session")
def section17():
    return CrossSection(1.0, 17)


@pytest.fixture(scope="session")
def phi4(section17, p4):
    """Flow-route profile at p = 4, L = 1, h = 1/16."""
    return phi_via_rescaled_flow(section17, p4)


@pytest.fixture(scope="session")
def wave4(phi4):
    from tubewave.wavefront import critical_speed
    return critical_speed(4.0, phi4)


@pytest.fixture(scope="session")
def ladder(phi4):
    """refine_truncation over j = 4, 8, 16 at h = 1/16."""
    from tubewave.wavefront import refine_truncation
    return refine_truncation([4.0, 8.0, 16.0], phi4)


@pytest.fixture(scope="session")
def bump_run(p4, section17, phi4):
    """Rescaled p = 4 run from a small bump, tau in [0, 40]."""
    from tubewave.asymptotics import simulate
    grid = TubeGrid.symmetric(section17, 8.0)
    return simulate(p4, grid, 40.0, 0.25, init="bump", phi=phi4)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
