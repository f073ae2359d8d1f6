import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defix.config import ControlConfig
from defix.control import (OffRouteError, PidState, fit_arc_target, interpolate_route, make_controller, pid_step,
                           target_steering, target_velocity)
from defix.geometry import box_corners, boxes_overlap, project_onto_polyline, polyline_arclength, wrap_angle
from defix.sim import VehicleState


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-6)


def test_boxes_touching_do_not_overlap():
    a = box_corners(0, 0, 0, 1, 1)
    b = box_corners(2, 0, 0, 1, 1)
    assert not boxes_overlap(a, b)
    assert boxes_overlap(a, box_corners(1.9, 0.5, 0.3, 1, 1))


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-3, 3))
def test_overlap_symmetric(x, y, h):
    a = box_corners(0, 0, 0, 2.25, 1.0)
    b = box_corners(x, y, h, 1.0, 1.0)
    assert boxes_overlap(a, b) == boxes_overlap(b, a)


def test_projection_left_positive():
    pts = np.array([[0.0, 0.0], [10.0, 0.0]])
    s, lat, _ = project_onto_polyline(pts, polyline_arclength(pts), np.array([4.0, 2.0]))
    assert s == pytest.approx(4.0) and lat == pytest.approx(2.0)
    _, lat, _ = project_onto_polyline(pts, polyline_arclength(pts), np.array([4.0, -1.0]))
    assert lat == pytest.approx(-1.0)


@settings(max_examples=60)
@given(st.lists(st.floats(14.0, 50.0), min_size=1, max_size=8), st.floats(-3, 3))
def test_interpolation_spacing_and_sparse_points_kept(lengths, heading):
    pts = [np.zeros(2)]
    for k, L in enumerate(lengths):
        h = heading + 0.2 * k
        pts.append(pts[-1] + L * np.array([math.cos(h), math.sin(h)]))
    sparse = np.array(pts)
    dense = interpolate_route(sparse)
    gaps = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    assert np.all(np.abs(gaps - 4.0) <= 0.5 + 1e-9)
    for p in sparse:
        assert np.min(np.linalg.norm(dense - p, axis=1)) < 1e-9


def test_interpolation_rejects_short_input():
    with pytest.raises(ValueError):
        interpolate_route([[0.0, 0.0]])


def test_target_velocity_example():
    window = np.array([[4.0 * k, 0.0] for k in range(6)])
    assert target_velocity(window, 0.8) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        target_velocity(window, 0.0)


def test_target_steering_examples(caplog):
    assert target_steering((5.0, 0.0)) == 0.0
    assert target_steering((0.0, 5.0)) == pytest.approx(math.pi / 2)
    assert target_steering((-1.0, 0.0)) == pytest.approx(math.pi)
    with caplog.at_level(logging.WARNING):
        assert target_steering((0.0, 0.0)) == 0.0
    assert "degenerate" in caplog.text


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=200), st.floats(0.5, 20))
def test_pid_integral_bounded(errors, windup):
    state = PidState(1.0, 0.5, 0.1, windup=windup)
    for e in errors:
        state, out = pid_step(state, e, 0.05)
        assert abs(state.integral) <= windup + 1e-12
        assert math.isfinite(out)


def test_pid_output_limits_and_bad_dt():
    state = PidState(10.0, 0.0, 0.0, output_limits=(-1.0, 1.0))
    _, out = pid_step(state, 5.0, 0.05)
    assert out == 1.0
    with pytest.raises(ValueError):
        pid_step(state, 1.0, 0.0)


def test_fit_arc_target_raises_far_off_route():
    dense = interpolate_route([[0, 0], [40, 0]])
    with pytest.raises(OffRouteError):
        fit_arc_target(dense, VehicleState(10, 30, 0, 0), 5.0)


def test_controller_brake_zeroes_throttle():
    dense = interpolate_route([[0, 0], [40, 0]])
    ctl = make_controller(ControlConfig())
    c = ctl.act(VehicleState(0, 0, 0, 3.0), dense, 0, brake=True)
    assert c.brake and c.throttle == 0.0
    c = ctl.act(VehicleState(0, 0, 0, 0.0), dense, 0, brake=False)
    assert not c.brake and c.throttle > 0
