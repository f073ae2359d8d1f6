import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from defix.perception import (FeatureEncoder, SpeedHistory, build_observation, from_local_frame, to_local_frame)
from defix.control import OffRouteError
from defix.sim import WEATHERS, Actor, VehicleState, build_route, initial_world

ROUTE = build_route("r", [[0.0, 0.0], [60.0, 0.0], [120.0, 0.0]])
ENC = FeatureEncoder()


def test_local_frame_example():
    ego = VehicleState(0.0, 0.0, math.pi / 2, 0.0)
    assert np.allclose(to_local_frame(ego, (0.0, 5.0)), [5.0, 0.0])


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-4, 4), st.floats(-30, 30), st.floats(-30, 30))
def test_local_frame_round_trip(x, y, h, px, py):
    ego = VehicleState(x, y, h, 0.0)
    assert np.allclose(from_local_frame(ego, to_local_frame(ego, (px, py))), [px, py], atol=1e-9)


def test_encoder_deterministic_and_frozen():
    w = initial_world(ROUTE, 10.0, 3.0)
    a, b = ENC.encode(w), FeatureEncoder().encode(w)
    assert a.shape == (ENC.cfg.n_features,) and np.array_equal(a, b)
    assert ENC.projection_hash() == FeatureEncoder().projection_hash()
    with pytest.raises(ValueError):
        ENC.projection[0, 0] = 1.0


def test_encoder_is_local():
    far = Actor(1, "vehicle", VehicleState(100.0, 0.0, 0.0, 0.0, 2.25, 1.0))
    near = Actor(1, "vehicle", VehicleState(25.0, 0.0, 0.0, 0.0, 2.25, 1.0))
    base = ENC.encode(initial_world(ROUTE, 10.0, 3.0))
    assert np.array_equal(base, ENC.encode(initial_world(ROUTE, 10.0, 3.0, [far])))
    assert not np.array_equal(base, ENC.encode(initial_world(ROUTE, 10.0, 3.0, [near])))


def test_encoder_sees_ahead_not_far_behind():
    base = ENC.encode(initial_world(ROUTE, 40.0, 3.0))
    behind = Actor(1, "vehicle", VehicleState(30.0, 0.0, 0.0, 0.0, 2.25, 1.0))
    alongside = Actor(1, "vehicle", VehicleState(38.0, 3.5, 0.0, 0.0, 2.25, 1.0))
    assert np.array_equal(base, ENC.encode(initial_world(ROUTE, 40.0, 3.0, [behind])))
    assert not np.array_equal(base, ENC.encode(initial_world(ROUTE, 40.0, 3.0, [alongside])))


def test_noise_depends_on_weather():
    w = initial_world(ROUTE, 10.0, 3.0)
    clear = replace(w, weather=WEATHERS[0])
    assert np.array_equal(ENC.encode(clear, np.random.default_rng(0)), ENC.encode(clear))
    rainy = replace(w, weather=WEATHERS[-1])
    assert not np.array_equal(ENC.encode(rainy, np.random.default_rng(0)), ENC.encode(rainy))


def test_speed_history_pads_and_truncates():
    h = SpeedHistory(4)
    assert np.array_equal(h.array(), np.zeros(4))
    for v in (1, 2, 3, 4, 5, 6):
        h.push(v)
    assert np.array_equal(h.array(), [3, 4, 5, 6]) and len(h) == 4
    h2 = SpeedHistory(4)
    h2.push(7)
    assert np.array_equal(h2.array(), [0, 0, 0, 7])


def test_observation_off_route_raises():
    w = initial_world(ROUTE, 10.0, 3.0)
    obs = build_observation(w, ROUTE.dense, SpeedHistory(), ENC)
    assert obs.local_targets.shape == (ENC.cfg.n_targets, 2)
    assert np.all(obs.local_targets[:, 0] > 0)
    with pytest.raises(OffRouteError):
        build_observation(replace(w, route_lateral=25.0), ROUTE.dense, SpeedHistory(), ENC)
