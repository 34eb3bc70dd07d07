import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crsu4.device import DeviceConfig, VirtualDevice, planted_model_params

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def ref_cfg():
    return DeviceConfig.reference()


@pytest.fixture(scope="session")
def planted(ref_cfg):
    return planted_model_params(ref_cfg, 0.6)


@pytest.fixture
def device(ref_cfg):
    return VirtualDevice(ref_cfg)
