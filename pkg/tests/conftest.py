import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prguide import LatentGrid

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_grid(rng, c, w, h, scale=1.0):
    return LatentGrid(scale * rng.standard_normal((c, w, h)))


@pytest.fixture
def make_grid(rng):
    def make(c=3, w=4, h=5, scale=1.0):
        return random_grid(rng, c, w, h, scale)

    return make


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
