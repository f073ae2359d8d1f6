"""Deterministic 2D kinematic driving world.

The world is a sequence of immutable ``WorldState`` snapshots. ``step`` advances the
ego with a kinematic bicycle model at a fixed 20 Hz rate, moves scripted actors,
cycles traffic lights and updates collision and route-progress bookkeeping.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import yaml

from .config import DAYTIMES, WEATHER_STATES, SimConfig
from .control import interpolate_route
from .geometry import (box_corners, boxes_overlap, point_at, polyline_arclength,
                       project_onto_polyline, segment_normals, wrap_angle)

log = logging.getLogger(__name__)

WEATHERS = tuple(f"{w}/{t}" for w in WEATHER_STATES for t in DAYTIMES)
ACTOR_KINDS = ("vehicle", "pedestrian", "static_obstacle")
SCENARIO_KINDS = ("stuck_vehicle", "red_light_runner", "crossing_pedestrian",
                  "static_obstacle", "uncontrolled_turn")
VEHICLE_HALF = (2.25, 1.0)
PEDESTRIAN_HALF = (0.3, 0.3)
OBSTACLE_HALF = (1.0, 1.0)
# crossing actors keep going this far past the far roadside so they leave the sensor view
CLEAR_DISTANCE = 30.0

# per-kind parameter ranges: trigger distance and actor speed drive the crossing actors,
# lateral_start is the roadside offset they start from
DEFAULT_PARAMETERS: dict[str, dict[str, tuple[float, float]]] = {
    "stuck_vehicle": {"lane_offset": (0.0, 0.0)},
    "static_obstacle": {"lane_offset": (0.0, 0.0)},
    "crossing_pedestrian": {"trigger_distance": (22.0, 28.0), "actor_speed": (1.4, 2.0),
                            "lateral_start": (8.0, 9.0), "side": (-1.0, 1.0)},
    "red_light_runner": {"trigger_distance": (26.0, 32.0), "actor_speed": (6.0, 8.0),
                         "lateral_start": (20.0, 22.0), "side": (-1.0, 1.0)},
    "uncontrolled_turn": {"trigger_distance": (26.0, 32.0), "actor_speed": (5.5, 7.0),
                          "lateral_start": (18.0, 20.0), "side": (-1.0, 1.0)},
}


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float = 0.0
    speed: float = 0.0
    half_length: float = VEHICLE_HALF[0]
    half_width: float = VEHICLE_HALF[1]

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be >= 0")
        if self.half_length <= 0 or self.half_width <= 0:
            raise ValueError("half extents must be > 0")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def half_extents(self) -> tuple[float, float]:
        return (self.half_length, self.half_width)

    def corners(self) -> np.ndarray:
        return box_corners(self.x, self.y, self.heading, self.half_length, self.half_width)


@dataclass(frozen=True)
class Behavior:
    mode: str = "static"
    trigger_s: float = 0.0
    direction: tuple[float, float] = (0.0, 0.0)
    speed: float = 0.0
    travel: float = 0.0
    travelled: float = 0.0
    triggered: bool = False


@dataclass(frozen=True)
class Actor:
    actor_id: int
    kind: str
    state: VehicleState
    behavior: Behavior = Behavior()


@dataclass(frozen=True)
class TrafficLight:
    light_id: int
    x: float
    y: float
    route_s: float
    influence_radius: float = 20.0
    cycle: tuple[float, float, float] = (10.0, 2.0, 8.0)
    offset: float = 0.0
    state: str = "green"

    def state_at(self, t: float) -> str:
        g, yl, r = self.cycle
        phase = (t + self.offset) % (g + yl + r)
        if phase < g:
            return "green"
        if phase < g + yl:
            return "yellow"
        return "red"


@dataclass(frozen=True, eq=False)
class Route:
    route_id: str
    sparse: np.ndarray
    dense: np.ndarray
    cum_s: np.ndarray
    normals: np.ndarray
    lane_width: float = 3.5
    lights: tuple = ()

    @property
    def length(self) -> float:
        return float(self.cum_s[-1])

    def point(self, s: float) -> tuple[np.ndarray, float]:
        return point_at(self.dense, self.cum_s, s)

    def index_at(self, s: float) -> int:
        return int(min(max(np.searchsorted(self.cum_s, s, side="right") - 1, 0), len(self.dense) - 1))

    def segment(self, s0: float, s1: float, route_id: str | None = None) -> "Route":
        """Sub-route spanning arclength [s0, s1]; lights inside are carried over."""
        s0, s1 = max(0.0, s0), min(self.length, s1)
        i0, i1 = self.index_at(s0), min(self.index_at(s1) + 1, len(self.dense) - 1)
        start, _ = self.point(s0)
        end, _ = self.point(s1)
        pts = [start] + [self.dense[k] for k in range(i0 + 1, i1 + 1) if s0 < self.cum_s[k] < s1] + [end]
        dense = np.array(pts)
        keep = np.concatenate([[True], np.linalg.norm(np.diff(dense, axis=0), axis=1) > 1e-6])
        dense = dense[keep]
        lights = tuple(replace(lt, route_s=lt.route_s - s0) for lt in self.lights if s0 <= lt.route_s <= s1)
        return build_route(route_id or f"{self.route_id}[{s0:.0f}:{s1:.0f}]", dense, self.lane_width,
                           lights, interpolate=False)


def build_route(route_id: str, sparse, lane_width: float = 3.5, lights=(), interpolate: bool = True) -> Route:
    sparse = np.asarray(sparse, dtype=float)
    dense = interpolate_route(sparse) if interpolate else sparse.copy()
    cum_s = polyline_arclength(dense)
    lights = tuple(lights)
    return Route(route_id, sparse, dense, cum_s, segment_normals(dense), float(lane_width), lights)


@dataclass(frozen=True)
class ScenarioTemplate:
    kind: str
    anchor: float
    parameters: dict = field(default_factory=dict)

    def ranges(self) -> dict[str, tuple[float, float]]:
        merged = dict(DEFAULT_PARAMETERS.get(self.kind, {}))
        merged.update({k: tuple(v) for k, v in self.parameters.items()})
        return merged

    def sample(self, rng: np.random.Generator) -> dict[str, float]:
        out = {}
        for name, (lo, hi) in sorted(self.ranges().items()):
            out[name] = float(lo + (hi - lo) * rng.random())
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "anchor": self.anchor,
                "parameters": {k: list(v) for k, v in self.parameters.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioTemplate":
        if d["kind"] not in SCENARIO_KINDS:
            raise ScenarioError(f"unknown scenario kind {d['kind']!r}")
        return cls(d["kind"], float(d["anchor"]), {k: tuple(v) for k, v in d.get("parameters", {}).items()})


@dataclass(frozen=True, eq=False)
class WorldState:
    time_step: int
    ego: VehicleState
    actors: tuple
    lights: tuple
    route: Route
    collision_flag: bool = False
    weather: str = WEATHERS[0]
    route_progress: int = 0
    route_s: float = 0.0
    route_lateral: float = 0.0
    route_covered: float = 0.0
    colliding: tuple = ()
    scenario: ScenarioTemplate | None = None

    @property
    def weather_state(self) -> str:
        return self.weather.split("/")[0]


class Control(NamedTuple):
    brake: bool = False
    steer: float = 0.0
    throttle: float = 0.0


def _colliding_ids(ego: VehicleState, actors) -> tuple:
    ego_c = ego.corners()
    reach = math.hypot(*ego.half_extents)
    hits = []
    for a in actors:
        st = a.state
        if math.hypot(st.x - ego.x, st.y - ego.y) > reach + math.hypot(*st.half_extents):
            continue
        if boxes_overlap(ego_c, st.corners()):
            hits.append(a.actor_id)
    return tuple(hits)


def _advance_actor(actor: Actor, ego_s: float, dt: float) -> Actor:
    b = actor.behavior
    if b.mode != "crossing":
        return actor
    triggered = b.triggered or ego_s >= b.trigger_s
    if not triggered or b.travelled >= b.travel:
        if triggered != b.triggered:
            return replace(actor, behavior=replace(b, triggered=True))
        if b.travelled >= b.travel and actor.state.speed != 0.0:
            return replace(actor, state=replace(actor.state, speed=0.0))
        return actor
    d = min(b.speed * dt, b.travel - b.travelled)
    st = actor.state
    moving = b.travelled + d < b.travel
    new_state = replace(st, x=st.x + b.direction[0] * d, y=st.y + b.direction[1] * d,
                        speed=b.speed if moving else 0.0)
    return replace(actor, state=new_state, behavior=replace(b, triggered=True, travelled=b.travelled + d))


def _update_progress(world_route: Route, ego: VehicleState, progress: int, covered: float,
                     cfg: SimConfig) -> tuple[int, float, float, float]:
    dense = world_route.dense
    last = len(dense) - 1
    p = np.array([ego.x, ego.y])
    hi = min(progress + cfg.progress_window, last)
    if hi > progress:
        d = np.linalg.norm(dense[progress + 1:hi + 1] - p, axis=1)
        within = np.nonzero(d <= cfg.progress_radius)[0]
        if len(within):
            progress = progress + 1 + int(within[-1])
    # progress may run up to progress_radius ahead of the ego, so the window starts that far back
    lo = int(np.searchsorted(world_route.cum_s, world_route.cum_s[progress] - cfg.progress_radius - 1.0)) - 1
    s, lateral, _ = project_onto_polyline(dense, world_route.cum_s, p, max(lo, 0),
                                          progress + cfg.progress_window + 6)
    covered = max(covered, s)
    return progress, s, lateral, covered


def step(world: WorldState, control: Control, cfg: SimConfig | None = None) -> WorldState:
    """Advance the world by one 1/20 s tick. Control inputs are saturated, never rejected."""
    cfg = cfg or SimConfig()
    dt = cfg.dt
    brake = bool(control.brake)
    steer = float(np.clip(control.steer if math.isfinite(control.steer) else 0.0, -cfg.max_steer, cfg.max_steer))
    throttle = float(np.clip(control.throttle if math.isfinite(control.throttle) else 0.0, 0.0, 1.0))
    ego = world.ego
    if brake:
        accel = -cfg.max_decel
    else:
        accel = throttle * cfg.max_accel - cfg.drag * ego.speed
    v = min(max(0.0, ego.speed + accel * dt), cfg.v_max)
    heading = ego.heading + v / cfg.wheelbase * math.tan(steer) * dt
    new_ego = replace(ego, x=ego.x + v * math.cos(heading) * dt, y=ego.y + v * math.sin(heading) * dt,
                      heading=heading, speed=v)

    actors = tuple(_advance_actor(a, world.route_s, dt) for a in world.actors)
    t = (world.time_step + 1) * dt
    lights = tuple(lt if lt.state == lt.state_at(t) else replace(lt, state=lt.state_at(t)) for lt in world.lights)
    hits = _colliding_ids(new_ego, actors)
    progress, s, lateral, covered = _update_progress(world.route, new_ego, world.route_progress,
                                                     world.route_covered, cfg)
    return replace(world, time_step=world.time_step + 1, ego=new_ego, actors=actors, lights=lights,
                   collision_flag=bool(hits), colliding=hits, route_progress=progress,
                   route_s=s, route_lateral=lateral, route_covered=covered)


def _place(route: Route, s: float, lateral: float) -> tuple[float, float, float]:
    p, heading = route.point(s)
    n = np.array([-math.sin(heading), math.cos(heading)])
    q = p + lateral * n
    return float(q[0]), float(q[1]), heading


def spawn_actors(route: Route, template: ScenarioTemplate, params: dict[str, float], first_id: int = 1) -> tuple:
    kind = template.kind
    s = template.anchor
    if kind in ("stuck_vehicle", "static_obstacle"):
        x, y, h = _place(route, s, params.get("lane_offset", 0.0))
        if kind == "stuck_vehicle":
            return (Actor(first_id, "vehicle", VehicleState(x, y, h, 0.0, *VEHICLE_HALF)),)
        return (Actor(first_id, "static_obstacle", VehicleState(x, y, h, 0.0, *OBSTACLE_HALF)),)
    side = 1.0 if params.get("side", 1.0) >= 0 else -1.0
    lateral = side * params["lateral_start"]
    x, y, h = _place(route, s, lateral)
    cross = wrap_angle(h - side * math.pi / 2)
    direction = (math.cos(cross), math.sin(cross))
    behavior = Behavior("crossing", trigger_s=s - params["trigger_distance"], direction=direction,
                        speed=params["actor_speed"], travel=2.0 * params["lateral_start"] + CLEAR_DISTANCE)
    if kind == "crossing_pedestrian":
        return (Actor(first_id, "pedestrian", VehicleState(x, y, cross, 0.0, *PEDESTRIAN_HALF), behavior),)
    return (Actor(first_id, "vehicle", VehicleState(x, y, cross, 0.0, *VEHICLE_HALF), behavior),)


def initial_world(route: Route, ego_s: float = 0.0, ego_speed: float = 0.0, actors=(), lights=None,
                  scenario: ScenarioTemplate | None = None, weather: str = WEATHERS[0],
                  cfg: SimConfig | None = None) -> WorldState:
    cfg = cfg or SimConfig()
    x, y, h = _place(route, ego_s, 0.0)
    ego = VehicleState(x, y, h, ego_speed)
    lights = route.lights if lights is None else tuple(lights)
    lights = tuple(replace(lt, state=lt.state_at(0.0)) for lt in lights)
    progress = route.index_at(ego_s)
    world = WorldState(0, ego, tuple(actors), lights, route, weather=weather, route_progress=progress,
                       route_s=ego_s, route_covered=ego_s, scenario=scenario)
    hits = _colliding_ids(ego, world.actors)
    return replace(world, collision_flag=bool(hits), colliding=hits)


def spawn_scenario(route: Route, template: ScenarioTemplate | None, seed: int, ego_s: float = 0.0,
                   ego_speed: float = 0.0, cfg: SimConfig | None = None) -> WorldState:
    """Build the start-of-episode world for ``template`` on ``route``; same inputs give identical worlds."""
    cfg = cfg or SimConfig()
    if template is None:
        return initial_world(route, ego_s, ego_speed, cfg=cfg)
    if template.kind not in SCENARIO_KINDS:
        raise ScenarioError(f"unknown scenario kind {template.kind!r}")
    if not (0.0 <= template.anchor <= route.length):
        raise ScenarioError(f"anchor {template.anchor:.1f} m outside route {route.route_id} "
                            f"of length {route.length:.1f} m")
    for name, (lo, hi) in template.ranges().items():
        if lo > hi:
            raise ScenarioError(f"parameter {name}: empty range [{lo}, {hi}]")
    rng = np.random.default_rng(seed)
    params = template.sample(rng)
    actors = spawn_actors(route, template, params)
    lights = list(route.lights)
    if template.kind == "red_light_runner":
        # the ego's own light stays green; the crossing vehicle is the one running red
        x, y, _ = _place(route, template.anchor - 6.0, -route.lane_width)
        lights.append(TrafficLight(100 + len(lights), x, y, template.anchor - 6.0,
                                   cfg.light_influence_radius, (3600.0, 2.0, 8.0), 0.0))
    return initial_world(route, ego_s, ego_speed, actors, lights, template, cfg=cfg)


def perturb_weather(world: WorldState, rng: np.random.Generator, step_interval: int = 20,
                    weathers: tuple = WEATHERS) -> WorldState:
    if step_interval < 1:
        raise ValueError("step_interval must be >= 1")
    if world.time_step % step_interval != 0:
        return world
    return replace(world, weather=weathers[int(rng.integers(len(weathers)))])


def affecting_light(world: WorldState, radius: float | None = None):
    best = None
    for lt in world.lights:
        if lt.route_s <= world.route_s:
            continue
        d = math.hypot(lt.x - world.ego.x, lt.y - world.ego.y)
        r = lt.influence_radius if radius is None else radius
        if d <= r and (best is None or d < best[0]):
            best = (d, lt)
    return None if best is None else best[1]


def in_cone(ego: VehicleState, x: float, y: float, cfg: SimConfig) -> bool:
    dx, dy = x - ego.x, y - ego.y
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    if lx <= 0.0 or math.hypot(lx, ly) > cfg.hazard_range:
        return False
    return abs(math.atan2(ly, lx)) <= math.radians(cfg.hazard_half_angle_deg)


def privileged_hazard(world: WorldState, cfg: SimConfig | None = None) -> tuple[bool, int | None]:
    """Ground-truth brake condition of the rule-based demonstrator."""
    cfg = cfg or SimConfig()
    light = affecting_light(world)
    if light is not None and light.state in ("red", "yellow"):
        return True, light.light_id
    for a in world.actors:
        if a.kind in ("vehicle", "pedestrian") and in_cone(world.ego, a.state.x, a.state.y, cfg):
            return True, None
    return False, None


# --- serialization -------------------------------------------------------------------------


def _r(v: float) -> float:
    return float(v)


def trace_record(world: WorldState, **extra) -> dict:
    e = world.ego
    rec = {
        "time_step": world.time_step,
        "ego": [_r(e.x), _r(e.y), _r(e.heading), _r(e.speed)],
        "actors": [[a.actor_id, a.kind, _r(a.state.x), _r(a.state.y), _r(a.state.heading), _r(a.state.speed)]
                   for a in world.actors],
        "lights": [[lt.light_id, lt.state] for lt in world.lights],
        "collision": world.collision_flag,
        "weather": world.weather,
        "route_progress": world.route_progress,
    }
    rec.update(extra)
    return rec


def route_to_dict(route: Route) -> dict:
    return {"route_id": route.route_id, "sparse": route.sparse.tolist(), "dense": route.dense.tolist(),
            "lane_width": route.lane_width,
            "lights": [light_to_dict(lt) for lt in route.lights]}


def route_from_dict(d: dict) -> Route:
    lights = tuple(light_from_dict(x) for x in d.get("lights", []))
    if "dense" in d:
        r = build_route(d["route_id"], d["dense"], d.get("lane_width", 3.5), lights, interpolate=False)
        return replace(r, sparse=np.asarray(d["sparse"], dtype=float))
    return build_route(d["route_id"], d["sparse"], d.get("lane_width", 3.5), lights)


def light_to_dict(lt: TrafficLight) -> dict:
    return {"light_id": lt.light_id, "x": lt.x, "y": lt.y, "route_s": lt.route_s,
            "influence_radius": lt.influence_radius, "cycle": list(lt.cycle), "offset": lt.offset,
            "state": lt.state}


def light_from_dict(d: dict) -> TrafficLight:
    return TrafficLight(int(d["light_id"]), float(d["x"]), float(d["y"]), float(d["route_s"]),
                        float(d.get("influence_radius", 20.0)), tuple(d.get("cycle", (10.0, 2.0, 8.0))),
                        float(d.get("offset", 0.0)), d.get("state", "green"))


def _vs(v: VehicleState) -> list:
    return [v.x, v.y, v.heading, v.speed, v.half_length, v.half_width]


def world_to_snapshot(world: WorldState) -> dict:
    return {
        "time_step": world.time_step,
        "ego": _vs(world.ego),
        "actors": [{"id": a.actor_id, "kind": a.kind, "state": _vs(a.state),
                    "behavior": {**a.behavior.__dict__, "direction": list(a.behavior.direction)}}
                   for a in world.actors],
        "lights": [light_to_dict(lt) for lt in world.lights],
        "route": route_to_dict(world.route),
        "collision_flag": world.collision_flag,
        "weather": world.weather,
        "route_progress": world.route_progress,
        "route_s": world.route_s,
        "route_lateral": world.route_lateral,
        "route_covered": world.route_covered,
        "colliding": list(world.colliding),
        "scenario": None if world.scenario is None else world.scenario.to_dict(),
    }


def world_from_snapshot(d: dict) -> WorldState:
    actors = []
    for a in d["actors"]:
        b = dict(a["behavior"])
        b["direction"] = tuple(b["direction"])
        actors.append(Actor(a["id"], a["kind"], VehicleState(*a["state"]), Behavior(**b)))
    return WorldState(
        d["time_step"], VehicleState(*d["ego"]), tuple(actors),
        tuple(light_from_dict(x) for x in d["lights"]), route_from_dict(d["route"]),
        d["collision_flag"], d["weather"], d["route_progress"], d["route_s"], d["route_lateral"],
        d["route_covered"], tuple(d["colliding"]),
        None if d["scenario"] is None else ScenarioTemplate.from_dict(d["scenario"]))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def snapshot_id(snapshot: dict) -> str:
    return hashlib.sha256(canonical_json(snapshot).encode()).hexdigest()[:16]


class TraceWriter:
    """Append-only line-delimited episode trace."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def write(self, world: WorldState, **extra) -> None:
        self._fh.write(canonical_json(trace_record(world, **extra)) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --- procedural routes and scenario files ---------------------------------------------------


def generate_route(route_id: str, rng: np.random.Generator, length: float, max_turn: float = 0.12,
                   spacing: tuple[float, float] = (14.0, 22.0), n_lights: int = 0,
                   lane_width: float = 3.5, light_cycle=(10.0, 2.0, 8.0),
                   influence_radius: float = 20.0, light_zone: tuple[float, float] = (0.3, 0.8)) -> Route:
    """Random gently curving route; sparse spacing stays inside [7.5, 50] m."""
    pts = [np.zeros(2)]
    heading = float(rng.uniform(-math.pi, math.pi))
    total = 0.0
    while total < length:
        step_len = float(rng.uniform(*spacing))
        step_len = min(step_len, max(length - total, spacing[0]))
        pts.append(pts[-1] + step_len * np.array([math.cos(heading), math.sin(heading)]))
        total += step_len
        heading += float(rng.uniform(-max_turn, max_turn))
    route = build_route(route_id, np.array(pts), lane_width)
    lights = []
    for k in range(n_lights):
        lo, hi = light_zone
        s = float(rng.uniform(lo, hi)) * route.length
        x, y, _ = _place(route, s, -lane_width)
        offset = float(rng.uniform(0.0, sum(light_cycle)))
        lights.append(TrafficLight(k + 1, x, y, s, influence_radius, tuple(light_cycle), offset))
    return replace(route, lights=tuple(lights))


def load_scenario_file(path: str | Path) -> tuple[list[ScenarioTemplate], list[Route]]:
    """Read the versioned scenario/route YAML file (see docs/formats.md)."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if data.get("version") != 1:
        raise ScenarioError(f"unsupported scenario file version {data.get('version')!r}")
    templates = [ScenarioTemplate.from_dict(t) for t in data.get("templates", [])]
    routes = []
    for r in data.get("routes", []):
        route = build_route(r["route_id"], r["sparse"], r.get("lane_width", 3.5))
        built = []
        for k, spec in enumerate(r.get("lights", [])):
            x, y, _ = _place(route, float(spec["s"]), -route.lane_width)
            built.append(TrafficLight(k + 1, x, y, float(spec["s"]), float(spec.get("influence_radius", 20.0)),
                                      tuple(spec.get("cycle", (10.0, 2.0, 8.0))), float(spec.get("offset", 0.0))))
        routes.append(replace(route, lights=tuple(built)))
    return templates, routes
