import numpy as np
import pytest

from risloc.channel import ChannelParams, PhaseSet, ScenarioGeometry
from risloc.rollout import RolloutConfig, Scenario


@pytest.fixture
def desk_geometry():
    return ScenarioGeometry(
        bs_position=np.array([40.0, -40.0, 10.0]),
        ris_origin=np.zeros(3),
        ris_rows=4,
        ris_cols=4,
        element_spacing=0.5 * 299_792_458.0 / 3.5e9,
        ue_center_x=20.0,
        ue_half_x=15.0,
        ue_center_y=20.0,
        ue_half_y=20.0,
        ue_z=-20.0,
    )


@pytest.fixture
def desk_channel():
    return ChannelParams(
        carrier_frequency_hz=3.5e9,
        ricean_kappa_db=10.0,
        direct_extra_attenuation_db=10.0,
        noise_power_dbm=-80.0,
    )


@pytest.fixture
def binary_phases():
    return PhaseSet((0.0, 1.0))


@pytest.fixture
def desk_scenario(desk_geometry, desk_channel, binary_phases):
    return Scenario(geometry=desk_geometry, channel=desk_channel, phase_set=binary_phases)


@pytest.fixture
def desk_rollout():
    return RolloutConfig(
        horizon=5,
        initial_power_watt=1.0,
        power_max_watt=1.0,
        observation_format="stacked",
        decode_mode="sample",
    )


def make_tiny_scenario(n_side=2, noise_dbm=-80.0, kappa_db=10.0, extra_db=10.0):
    """Minimal world for fast structural tests: n_side^2 elements."""
    geometry = ScenarioGeometry(
        bs_position=np.array([40.0, -40.0, 10.0]),
        ris_origin=np.zeros(3),
        ris_rows=n_side,
        ris_cols=n_side,
        element_spacing=0.0428,
        ue_center_x=20.0,
        ue_half_x=15.0,
        ue_center_y=20.0,
        ue_half_y=20.0,
        ue_z=-20.0,
    )
    channel = ChannelParams(
        carrier_frequency_hz=3.5e9,
        ricean_kappa_db=kappa_db,
        direct_extra_attenuation_db=extra_db,
        noise_power_dbm=noise_dbm,
    )
    return Scenario(geometry=geometry, channel=channel, phase_set=PhaseSet((0.0, 1.0)))
