"""Route suites: procedurally generated routes paired with scenario templates."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import Config
from .sim import (Route, ScenarioTemplate, TrafficLight, WorldState, _place, generate_route,
                  route_from_dict, route_to_dict, spawn_scenario)

# keep traffic lights this far (m) from a scenario anchor so the two never interact
LIGHT_CLEARANCE = 45.0
LIGHT_SPACING = 90.0


@dataclass
class RouteCase:
    case_id: str
    route: Route
    template: ScenarioTemplate | None
    seed: int

    @property
    def kind(self) -> str:
        return "none" if self.template is None else self.template.kind

    def world(self, cfg: Config) -> WorldState:
        return spawn_scenario(self.route, self.template, self.seed, cfg=cfg.sim)

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "route": route_to_dict(self.route), "seed": self.seed,
                "template": None if self.template is None else self.template.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RouteCase":
        tpl = None if d["template"] is None else ScenarioTemplate.from_dict(d["template"])
        return cls(d["case_id"], route_from_dict(d["route"]), tpl, int(d["seed"]))


def _with_lights(route: Route, rng: np.random.Generator, cfg: Config, avoid: float | None) -> Route:
    lights = []
    s = float(rng.uniform(40.0, 40.0 + LIGHT_SPACING))
    while s < route.length - 30.0:
        if avoid is None or abs(s - avoid) > LIGHT_CLEARANCE:
            x, y, _ = _place(route, s, -route.lane_width)
            cycle = tuple(cfg.sim.light_cycle)
            lights.append(TrafficLight(len(lights) + 1, x, y, s, cfg.sim.light_influence_radius, cycle,
                                       float(rng.uniform(0.0, sum(cycle)))))
        s += float(rng.uniform(0.8, 1.2)) * LIGHT_SPACING
    return replace(route, lights=tuple(lights))


def make_case(case_id: str, kind: str, rng: np.random.Generator, cfg: Config,
              length: tuple[float, float] = (150.0, 220.0), lights: bool = True) -> RouteCase:
    route = generate_route(case_id, rng, float(rng.uniform(*length)), lane_width=cfg.sim.lane_width)
    template = None
    if kind != "none":
        anchor = float(rng.uniform(0.45, 0.65)) * route.length
        template = ScenarioTemplate(kind, round(anchor, 3))
    if lights:
        route = _with_lights(route, rng, cfg, None if template is None else template.anchor)
    return RouteCase(case_id, route, template, int(rng.integers(2**31)))


def hazard_free_suite(n: int, seed: int, cfg: Config) -> list[RouteCase]:
    rng = np.random.default_rng(seed)
    return [make_case(f"free-{k:02d}", "none", rng, cfg, lights=False) for k in range(n)]


def mixed_suite(cfg: Config, seed: int, counts: dict | None = None, prefix: str = "mixed") -> list[RouteCase]:
    rng = np.random.default_rng(seed)
    counts = cfg.eval.mixed if counts is None else counts
    cases = []
    for kind in sorted(counts):
        for k in range(int(counts[kind])):
            cases.append(make_case(f"{prefix}-{kind}-{k:02d}", kind, rng, cfg))
    return cases


TRAINING_MIX = {"stuck_vehicle": 4, "crossing_pedestrian": 5, "red_light_runner": 5,
                "uncontrolled_turn": 5, "static_obstacle": 1, "none": 4}


def training_suite(cfg: Config, seed: int, n: int, prefix: str = "train") -> list[RouteCase]:
    """``n`` routes with scenario kinds drawn in the fixed proportions of ``TRAINING_MIX``."""
    rng = np.random.default_rng(seed)
    kinds = sorted(TRAINING_MIX)
    p = np.array([TRAINING_MIX[k] for k in kinds], dtype=float)
    p /= p.sum()
    picks = [kinds[int(i)] for i in rng.choice(len(kinds), size=n, p=p)]
    return [make_case(f"{prefix}-{k:03d}-{kind}", kind, rng, cfg) for k, kind in enumerate(picks)]


def benchmark_suite(name: str, cfg: Config, seed: int) -> list[RouteCase]:
    if name == "mixed":
        return mixed_suite(cfg, seed)
    if name == "short":
        n, length = cfg.eval.short_routes, cfg.eval.short_length
    elif name == "long":
        n, length = cfg.eval.long_routes, cfg.eval.long_length
    else:
        raise ValueError(f"unknown suite {name!r}")
    rng = np.random.default_rng(seed)
    kinds = ("none", "crossing_pedestrian", "red_light_runner", "uncontrolled_turn", "stuck_vehicle")
    return [make_case(f"{name}-{k:02d}", kinds[k % len(kinds)], rng, cfg, length) for k in range(n)]

