import numpy as np
import pytest

from gridpilot.feeder import build_admittance, builtin_feeder_path, load_feeder
from gridpilot.scenario import GenConfig

# Scenario-generation settings the bundled fixtures were tuned against.
# synth34 runs its feeder head at 1.045 p.u.; 4bus at 1.04 p.u.
SYNTH34_SLACK = 1.045
FOURBUS_SLACK = 1.04


def synth34_gen(count: int) -> GenConfig:
    return GenConfig(count=count, load_scale_range=(0.008, 0.045),
                     power_factor_range=(0.97, 1.0), households_per_node=2)


def fourbus_gen(count: int) -> GenConfig:
    return GenConfig(count=count, load_scale_range=(0.1, 0.5),
                     power_factor_range=(0.95, 1.0), households_per_node=2)


@pytest.fixture(scope="session")
def feeder2():
    return load_feeder(builtin_feeder_path("2bus"))


@pytest.fixture(scope="session")
def feeder4():
    return load_feeder(builtin_feeder_path("4bus"))


@pytest.fixture(scope="session")
def feeder34():
    return load_feeder(builtin_feeder_path("synth34"))


@pytest.fixture(scope="session")
def admittance4(feeder4):
    return build_admittance(feeder4)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
