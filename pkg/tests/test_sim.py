import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defix.config import SimConfig
from defix.sim import (WEATHERS, Actor, Control, ScenarioError, ScenarioTemplate, TrafficLight, VehicleState,
                       build_route, initial_world, load_scenario_file, perturb_weather, privileged_hazard,
                       spawn_scenario, step, world_from_snapshot, world_to_snapshot)

STRAIGHT = build_route("straight", [[0.0, 0.0], [100.0, 0.0]])


def world_with(actors=(), lights=(), ego_speed=5.0):
    return initial_world(STRAIGHT, 10.0, ego_speed, actors, lights)


def test_brake_decelerates_at_max_and_clamps():
    w = world_with(ego_speed=5.0)
    w2 = step(w, Control(brake=True, throttle=1.0))
    assert w2.ego.speed == pytest.approx(5.0 - 8.0 * 0.05)
    for _ in range(40):
        w2 = step(w2, Control(brake=True))
    assert w2.ego.speed == 0.0


@settings(max_examples=50)
@given(st.floats(0, 15), st.floats(-5, 5), st.floats(-1, 2), st.booleans())
def test_step_speed_non_negative_and_steer_saturated(v, steer, thr, brake):
    w = world_with(ego_speed=v)
    w2 = step(w, Control(brake, steer, thr))
    assert w2.ego.speed >= 0.0
    max_yaw = w2.ego.speed / 2.5 * math.tan(0.7) * 0.05
    assert abs(w2.ego.heading - w.ego.heading) <= max_yaw + 1e-12
    assert w2.time_step == w.time_step + 1


def test_step_non_finite_controls_treated_as_zero():
    w = world_with(ego_speed=3.0)
    w2 = step(w, Control(False, float("nan"), float("inf")))
    assert math.isfinite(w2.ego.x) and w2.ego.heading == pytest.approx(0.0)


def test_collision_flag_with_vehicle_ahead():
    ahead = Actor(1, "vehicle", VehicleState(20.0, 0.0, 0.0, 0.0, 2.25, 1.0))
    w = world_with([ahead])
    assert not w.collision_flag
    for _ in range(30):
        w = step(w, Control(throttle=1.0))
    assert w.collision_flag and w.colliding == (1,)


def test_privileged_hazard_cases():
    vehicle = Actor(1, "vehicle", VehicleState(20.0, 0.0, 0.0, 0.0, 2.25, 1.0))
    assert privileged_hazard(world_with([vehicle]))[0]
    behind = Actor(1, "vehicle", VehicleState(2.0, 0.0, 0.0, 0.0, 2.25, 1.0))
    assert not privileged_hazard(world_with([behind]))[0]
    far = Actor(1, "vehicle", VehicleState(30.0, 0.0, 0.0, 0.0, 2.25, 1.0))
    assert not privileged_hazard(world_with([far]))[0]
    wide = Actor(1, "pedestrian", VehicleState(20.0, 6.0, 0.0, 0.0, 0.3, 0.3))
    assert not privileged_hazard(world_with([wide]))[0]
    static = Actor(1, "static_obstacle", VehicleState(20.0, 0.0, 0.0, 0.0, 1.0, 1.0))
    assert not privileged_hazard(world_with([static]))[0]


def test_red_light_ahead_triggers_green_does_not():
    red = TrafficLight(7, 25.0, -3.5, 25.0, cycle=(0.0, 0.0, 10.0))
    hit, lid = privileged_hazard(world_with(lights=[red]))
    assert hit and lid == 7
    green = TrafficLight(7, 25.0, -3.5, 25.0, cycle=(10.0, 0.0, 0.0))
    assert not privileged_hazard(world_with(lights=[green]))[0]
    passed = TrafficLight(7, 5.0, -3.5, 5.0, cycle=(0.0, 0.0, 10.0))
    assert not privileged_hazard(world_with(lights=[passed]))[0]


def test_light_cycle():
    lt = TrafficLight(1, 0, 0, 0, cycle=(10.0, 2.0, 8.0))
    assert [lt.state_at(t) for t in (0.0, 10.5, 13.0, 20.1)] == ["green", "yellow", "red", "green"]


def test_spawn_scenario_deterministic_and_validated():
    tpl = ScenarioTemplate("crossing_pedestrian", 60.0)
    a = world_to_snapshot(spawn_scenario(STRAIGHT, tpl, 5))
    b = world_to_snapshot(spawn_scenario(STRAIGHT, tpl, 5))
    assert a == b
    with pytest.raises(ScenarioError):
        spawn_scenario(STRAIGHT, ScenarioTemplate("stuck_vehicle", 500.0), 1)
    with pytest.raises(ScenarioError):
        spawn_scenario(STRAIGHT, ScenarioTemplate("stuck_vehicle", 50.0, {"lane_offset": (1.0, 0.0)}), 1)
    with pytest.raises(ScenarioError):
        ScenarioTemplate.from_dict({"kind": "alien", "anchor": 1.0})


def test_crossing_actor_waits_for_trigger_then_moves():
    tpl = ScenarioTemplate("crossing_pedestrian", 60.0)
    w = spawn_scenario(STRAIGHT, tpl, 1, ego_s=0.0)
    start = w.actors[0].state.position
    w2 = step(w, Control())
    assert np.allclose(w2.actors[0].state.position, start)
    w = spawn_scenario(STRAIGHT, tpl, 1, ego_s=50.0)
    for _ in range(5):
        w = step(w, Control(brake=True))
    assert not np.allclose(w.actors[0].state.position, start)


def test_weather_changes_only_on_interval():
    w = world_with()
    rng = np.random.default_rng(0)
    w1 = replace(w, time_step=7)
    assert perturb_weather(w1, rng) is w1
    seen = {perturb_weather(replace(w, time_step=0), rng).weather for _ in range(200)}
    assert seen == set(WEATHERS)
    with pytest.raises(ValueError):
        perturb_weather(w, rng, 0)


def test_snapshot_round_trip():
    w = spawn_scenario(STRAIGHT, ScenarioTemplate("red_light_runner", 60.0), 3, ego_s=5.0)
    for _ in range(10):
        w = step(w, Control(throttle=0.5))
    snap = world_to_snapshot(w)
    assert world_to_snapshot(world_from_snapshot(snap)) == snap


def test_step_deterministic():
    w = spawn_scenario(STRAIGHT, ScenarioTemplate("uncontrolled_turn", 60.0), 3)
    a, b = w, w
    for k in range(100):
        c = Control(k % 7 == 0, 0.1, 0.6)
        a, b = step(a, c), step(b, c)
    assert world_to_snapshot(a) == world_to_snapshot(b)


def test_load_scenario_file(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("version: 1\ntemplates:\n  - {kind: stuck_vehicle, anchor: 50}\n"
                 "routes:\n  - route_id: r1\n    sparse: [[0, 0], [40, 0], [80, 0]]\n"
                 "    lights: [{s: 30, offset: 2}]\n")
    templates, routes = load_scenario_file(p)
    assert templates[0].kind == "stuck_vehicle"
    assert routes[0].length == pytest.approx(80.0) and routes[0].lights[0].route_s == 30.0
    p.write_text("version: 2\n")
    with pytest.raises(ScenarioError):
        load_scenario_file(p)


def test_sim_config_defaults():
    cfg = SimConfig()
    assert cfg.dt == 0.05 and cfg.max_decel == 8.0
