import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from modisac import harness


@pytest.fixture(scope="session")
def desk_data():
    """Desk-scale scenario (K=4, M=8, N=32, N_RF=16), seed 0."""
    return harness.prepare_scenario(harness.desk_config(seed=0))


@pytest.fixture(scope="session")
def small_data():
    """Small instance (K=3, M=4, N=12, N_RF=9) with a near-field user."""
    cfg = harness.desk_config(
        seed=0,
        subarrays=3,
        antennas_per_subarray=4,
        user_antennas=3,
        user={"range_m": 12.0, "angle_deg": 15.0},
    )
    return harness.prepare_scenario(cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
