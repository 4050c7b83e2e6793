import sys
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dalab.maps import DAMap, Shear
from dalab.torus import A0, analyze_linear

settings.register_profile(
    "dalab", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("dalab")


def shear_map(eps: float) -> DAMap:
    """The shipped test family: A0 after a shear of the first coordinate driven by y + z."""
    return DAMap(A0, [Shear(0, (0, 1, 1), eps)] if eps else [])


@pytest.fixture(scope="session")
def lin():
    return analyze_linear(A0)


@pytest.fixture(scope="session")
def f0():
    return shear_map(0.0)


@pytest.fixture(scope="session")
def f01():
    return shear_map(0.01)


@pytest.fixture(scope="session")
def f05():
    return shear_map(0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def bundles_for(f, resolution=32):
    from dalab.foliation import compute_bundle

    return {lab: compute_bundle(f, lab, resolution, residual_samples=0) for lab in f.linear.labels}


@pytest.fixture(scope="session")
def bundles0(f0):
    return bundles_for(f0, 8)


@pytest.fixture(scope="session")
def bundles05(f05):
    return bundles_for(f05)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS, key=lambda k: (int(k.rstrip("ab")) if isinstance(k, str) else k, str(k))):
        terminalreporter.write_line(mod.RESULTS[key])
