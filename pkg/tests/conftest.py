import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from calcscore.volio import CtVolume, MaskVolume, VoxelSpacing

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_ct(arr, spacing=(1.0, 1.0, 1.0)) -> CtVolume:
    return CtVolume(np.asarray(arr, dtype=np.int16), VoxelSpacing(*spacing))


def make_mask(arr, spacing=(1.0, 1.0, 1.0)) -> MaskVolume:
    return MaskVolume(np.asarray(arr, dtype=bool), VoxelSpacing(*spacing))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
