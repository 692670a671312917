import os
import sys

# ── Ensure project root is in Python path ──────────────────────────────────────
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from modules.network import BackboneConfig, StageSpec
from modules.pointcloud import RVSensor
from modules.selftrain import RoundPlan
from modules.synth import DomainShift, DomainSpec, SceneRecipe, Sensor, make_domain_pair
from utils.config import DomainsConfig, RunConfig

# desk stride layout at two channels per stage
TINY_STAGES = tuple(
    StageSpec(2, s) for s in ((1, 1), (1, 2), (1, 1), (1, 2), (1, 1), (2, 1), (1, 1))
)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running desk experiment, needs CONDA_DESK_SLOW=1")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_cfg():
    return BackboneConfig(stages=TINY_STAGES, num_classes=3, input_hw=(8, 16))


@pytest.fixture
def tiny_sensor():
    return RVSensor(h=8, w=32)


@pytest.fixture
def tiny_recipe():
    return SceneRecipe(extent=20.0, sensor=Sensor(rings=8, azimuth_bins=32))


@pytest.fixture
def tiny_pair(tiny_recipe):
    return make_domain_pair(tiny_recipe, DomainSpec(), DomainShift(intensity_shift=-0.1), 4, seed=7)


@pytest.fixture
def tiny_config():
    """Factory for a seconds-scale RunConfig; keyword arguments replace top-level fields."""

    def make(**over):
        cfg = RunConfig(
            sensor=RVSensor(h=8, w=32),
            domains=DomainsConfig(scenes=3, extent=20.0),
            model=BackboneConfig(stages=TINY_STAGES, input_hw=(8, 32)),
            train=RoundPlan(pretrain_epochs=1, round_epochs=(1, 1), batch_size=2),
            seed=3,
        )
        for key, value in over.items():
            setattr(cfg, key, value)
        return cfg.validate()

    return make
