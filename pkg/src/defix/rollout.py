"""Shared episode loop: weather, speed history, stall tracking and infraction detection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .config import Config
from .perception import FeatureEncoder, Observation, SpeedHistory, build_observation
from .rl import LaneShift, StallTracker, shifted_dense
from .sim import Control, Route, WorldState, perturb_weather, snapshot_id, step, world_to_snapshot

COLLISION_KINDS = {"pedestrian": "collision_pedestrian", "vehicle": "collision_vehicle",
                   "static_obstacle": "collision_static"}


class Agent(Protocol):
    name: str

    def reset(self, world: WorldState, ctx: "EpisodeContext") -> None: ...

    def act(self, world: WorldState, ctx: "EpisodeContext") -> Control: ...


@dataclass
class InfractionRecord:
    kind: str
    route_id: str
    route_position: float
    time_step: int
    snapshot: dict
    snapshot_id: str
    policy: str = ""

    def to_dict(self, with_snapshot: bool = True) -> dict:
        d = {"kind": self.kind, "route_id": self.route_id, "route_position": round(self.route_position, 3),
             "time_step": self.time_step, "snapshot_id": self.snapshot_id, "policy": self.policy}
        if with_snapshot:
            d["snapshot"] = self.snapshot
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InfractionRecord":
        return cls(d["kind"], d["route_id"], float(d["route_position"]), int(d["time_step"]),
                   d.get("snapshot", {}), d["snapshot_id"], d.get("policy", ""))


class EpisodeContext:
    """Per-episode state the agents share: observation cache, lane shift, stall counter."""

    def __init__(self, cfg: Config, route: Route, encoder: FeatureEncoder, noise_rng: np.random.Generator):
        self.cfg = cfg
        self.route = route
        self.encoder = encoder
        self.noise_rng = noise_rng
        self.history = SpeedHistory(cfg.perception.history)
        self.stall = StallTracker(cfg.stall_steps)
        self.shift = LaneShift(blend=cfg.dqn.blend)
        self.policy = ""
        self._dense_key = None
        self._dense = route.dense
        self._obs_step = -1
        self._obs: Observation | None = None

    @property
    def dense(self) -> np.ndarray:
        if self._dense_key != self.shift:
            self._dense = shifted_dense(self.route, self.shift)
            self._dense_key = self.shift
        return self._dense

    def observe(self, world: WorldState) -> Observation:
        """Observation for this step, computed at most once (noise is drawn once)."""
        if self._obs_step != world.time_step or self._obs is None:
            self._obs = build_observation(world, self.dense, self.history, self.encoder, self.noise_rng,
                                          self.cfg.sim.off_route_distance)
            self._obs_step = world.time_step
        return self._obs

    def features(self, world: WorldState) -> np.ndarray:
        return self.observe(world).features


@dataclass
class EpisodeResult:
    route_id: str
    final: WorldState
    steps: int
    termination: str
    infractions: list[InfractionRecord] = field(default_factory=list)
    policy_steps: dict = field(default_factory=dict)

    @property
    def route_completion(self) -> float:
        length = self.final.route.length
        if self.termination == "completed":
            return 100.0
        return float(np.clip(100.0 * self.final.route_covered / length, 0.0, 100.0))


StepCallback = Callable[[WorldState, Control, WorldState, EpisodeContext], None]


def _record(kind: str, world: WorldState, ctx: EpisodeContext) -> InfractionRecord:
    snap = world_to_snapshot(world)
    return InfractionRecord(kind, world.route.route_id, float(world.route_s), world.time_step, snap,
                            snapshot_id(snap), ctx.policy)


def detect_infractions(before: WorldState, after: WorldState) -> list[str]:
    """Collision kinds on the rising edge per actor, plus red lights crossed during the step."""
    kinds = []
    new_hits = set(after.colliding) - set(before.colliding)
    by_id = {a.actor_id: a for a in after.actors}
    for aid in sorted(new_hits):
        kinds.append(COLLISION_KINDS[by_id[aid].kind])
    for lt in after.lights:
        if before.route_s < lt.route_s <= after.route_s and lt.state == "red":
            kinds.append("red_light")
    return kinds


def run_episode(agent: Agent, world: WorldState, cfg: Config, seed: int, encoder: FeatureEncoder | None = None,
                max_steps: int | None = None, on_step: StepCallback | None = None,
                trace=None) -> EpisodeResult:
    """Drive ``agent`` until completion, blockage, deviation or timeout.

    Collisions do not end the episode; they are recorded once per contact.
    """
    encoder = encoder or FeatureEncoder(cfg.perception, cfg.sim)
    rng = np.random.default_rng(seed)
    weather_rng = np.random.default_rng(rng.integers(2**63))
    ctx = EpisodeContext(cfg, world.route, encoder, np.random.default_rng(rng.integers(2**63)))
    route = world.route
    if max_steps is None:
        # generous budget: the whole route at 2 m/s plus one stall window
        max_steps = int(route.length / 2.0 / cfg.sim.dt) + cfg.stall_steps
    world = perturb_weather(world, weather_rng, cfg.sim.weather_interval)
    ctx.history.push(world.ego.speed)
    agent.reset(world, ctx)
    infractions: list[InfractionRecord] = []
    usage: dict[str, int] = {}
    termination = "timeout"
    for _ in range(max_steps):
        ctl = agent.act(world, ctx)
        usage[ctx.policy or agent.name] = usage.get(ctx.policy or agent.name, 0) + 1
        nxt = step(world, ctl, cfg.sim)
        ctx.stall.update(nxt.ego.speed)
        if on_step is not None:
            on_step(world, ctl, nxt, ctx)
        if trace is not None:
            trace.write(nxt, policy=ctx.policy or agent.name)
        for kind in detect_infractions(world, nxt):
            infractions.append(_record(kind, nxt, ctx))
        world = nxt
        if world.route_covered >= route.length - 0.5:
            termination = "completed"
            break
        if ctx.stall.tau:
            infractions.append(_record("agent_blocked", world, ctx))
            termination = "agent_blocked"
            break
        if abs(world.route_lateral) > cfg.sim.off_route_distance:
            infractions.append(_record("route_deviation", world, ctx))
            termination = "route_deviation"
            break
        world = perturb_weather(world, weather_rng, cfg.sim.weather_interval)
        ctx.history.push(world.ego.speed)
    return EpisodeResult(route.route_id, world, world.time_step, termination, infractions, usage)
