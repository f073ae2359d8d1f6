"""Route metrics (RC, IS, DS), suite evaluation and failure extraction."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .perception import FeatureEncoder
from .rl import MiniScenario, MiniScenarioEnv, rl_act
from .rollout import EpisodeResult, InfractionRecord, run_episode
from .sim import ScenarioTemplate, TraceWriter

PENALIZED = ("collision_pedestrian", "collision_vehicle", "collision_static", "red_light")
INFRACTION_KINDS = PENALIZED + ("agent_blocked", "route_deviation")
# tie-break order when two failure kinds are equally frequent (most severe first)
SEVERITY = ("collision_pedestrian", "collision_vehicle", "collision_static", "red_light",
            "agent_blocked", "route_deviation")
MINI_BEFORE, MINI_AFTER = 30.0, 60.0


def infraction_score(counts: dict, penalties: dict) -> float:
    score = 1.0
    for kind, n in counts.items():
        if kind in penalties:
            score *= penalties[kind] ** int(n)
    return score


def driving_score(rc: float, score: float) -> float:
    return rc * score


@dataclass
class RouteResult:
    route_id: str
    scenario_kind: str
    RC: float
    IS: float
    DS: float
    termination: str
    infractions: dict = field(default_factory=dict)
    policy_steps: dict = field(default_factory=dict)
    steps: int = 0

    def to_dict(self) -> dict:
        return {"route_id": self.route_id, "scenario_kind": self.scenario_kind, "RC": round(self.RC, 4),
                "IS": round(self.IS, 6), "DS": round(self.DS, 4), "termination": self.termination,
                "infractions": dict(sorted(self.infractions.items())),
                "policy_steps": dict(sorted(self.policy_steps.items())), "steps": self.steps}


def route_result(ep: EpisodeResult, scenario_kind: str, penalties: dict) -> RouteResult:
    counts = Counter(r.kind for r in ep.infractions)
    rc = ep.route_completion
    score = infraction_score(counts, penalties)
    return RouteResult(ep.route_id, scenario_kind, rc, score, driving_score(rc, score), ep.termination,
                       dict(counts), dict(ep.policy_steps), ep.steps)


@dataclass
class SuiteSummary:
    RC: float
    IS: float
    DS: float
    n_routes: int
    infractions: dict

    def to_dict(self) -> dict:
        return {"RC": round(self.RC, 4), "IS": round(self.IS, 6), "DS": round(self.DS, 4),
                "n_routes": self.n_routes, "infractions": dict(sorted(self.infractions.items()))}


def aggregate(results: list[RouteResult]) -> SuiteSummary:
    """Suite numbers are plain means of the per-route values."""
    if not results:
        return SuiteSummary(0.0, 1.0, 0.0, 0, {})
    totals = Counter()
    for r in results:
        totals.update(r.infractions)
    return SuiteSummary(float(np.mean([r.RC for r in results])), float(np.mean([r.IS for r in results])),
                        float(np.mean([r.DS for r in results])), len(results),
                        {k: int(totals.get(k, 0)) for k in INFRACTION_KINDS})


def evaluate_suite(make_agent, cases, cfg: Config, seed: int, encoder: FeatureEncoder | None = None,
                   trace_dir=None) -> tuple[list[RouteResult], list[InfractionRecord]]:
    """Run a fresh agent per route; returns per-route results and every infraction record."""
    encoder = encoder or FeatureEncoder(cfg.perception, cfg.sim)
    results, records = [], []
    for k, case in enumerate(cases):
        trace = None if trace_dir is None else TraceWriter(f"{trace_dir}/{case.case_id}.jsonl")
        try:
            ep = run_episode(make_agent(), case.world(cfg), cfg, seed + k, encoder, trace=trace)
        finally:
            if trace is not None:
                trace.close()
        results.append(route_result(ep, case.kind, cfg.eval.penalties))
        records.extend(ep.infractions)
    return results, records


# --- failure mining -------------------------------------------------------------------------------


@dataclass
class FailureSpot:
    kind: str
    route_id: str
    position: float
    occurrences: int
    record: InfractionRecord

    def to_dict(self) -> dict:
        return {"kind": self.kind, "route_id": self.route_id, "position": round(self.position, 3),
                "occurrences": self.occurrences, "snapshot_id": self.record.snapshot_id}


def extract_failures(records: list[InfractionRecord], dedupe_bin: float = 5.0) -> list[FailureSpot]:
    """Deduplicate infractions by (route, kind, position bin); first record of each spot is kept."""
    spots: dict[tuple, FailureSpot] = {}
    for r in records:
        key = (r.route_id, r.kind, math.floor(r.route_position / dedupe_bin) * dedupe_bin)
        if key in spots:
            spots[key].occurrences += 1
        else:
            spots[key] = FailureSpot(r.kind, r.route_id, r.route_position, 1, r)
    return sorted(spots.values(), key=lambda s: (s.route_id, s.position, s.kind))


def failure_frequencies(spots: list[FailureSpot]) -> dict[str, int]:
    return dict(sorted(Counter(s.kind for s in spots).items()))


def select_failure(spots: list[FailureSpot], mode: str = "frequency", rng: np.random.Generator | None = None,
                   exclude_kinds=()) -> FailureSpot | None:
    """Most frequent failure kind (ties by severity), then its first spot; or a uniform pick."""
    pool = [s for s in spots if s.kind not in exclude_kinds]
    if not pool:
        return None
    if mode == "random":
        rng = rng or np.random.default_rng(0)
        return pool[int(rng.integers(len(pool)))]
    freq = failure_frequencies(pool)
    kind = min(freq, key=lambda k: (-freq[k], SEVERITY.index(k) if k in SEVERITY else len(SEVERITY)))
    return next(s for s in pool if s.kind == kind)


def reconstruct_mini_scenario(spot: FailureSpot, cfg: Config) -> MiniScenario:
    """Cut the route around the failure and re-anchor its scenario on the cut."""
    from .sim import route_from_dict

    snap = spot.record.snapshot
    route = route_from_dict(snap["route"])
    s_fail = float(spot.record.route_position)
    s0 = max(0.0, s_fail - MINI_BEFORE)
    segment = route.segment(s0, s_fail + MINI_AFTER, f"{route.route_id}@{s_fail:.0f}")
    template = None
    if snap.get("scenario") is not None:
        src = ScenarioTemplate.from_dict(snap["scenario"])
        if s0 <= src.anchor <= s0 + segment.length:
            template = ScenarioTemplate(src.kind, src.anchor - s0, src.parameters)
    kind = template.kind if template is not None else spot.kind
    return MiniScenario(spot.record.snapshot_id, template, segment, s_fail - s0, tuple(cfg.dqn.spawn_offset),
                        cfg.dqn.max_steps, kind)


def evaluate_mini(model, scenario: MiniScenario, cfg: Config, seeds, encoder: FeatureEncoder | None = None
                  ) -> dict:
    """Greedy rollouts of a Q-network on seeded mini-scenario episodes."""
    env = MiniScenarioEnv(scenario, cfg, encoder)
    outcomes = []
    for s in seeds:
        obs = env.reset(np.random.default_rng(s))
        done = False
        while not done:
            obs, _, done, _ = env.step(int(rl_act(model, obs)))
        outcomes.append((env.passed, env.collided))
    n = len(outcomes)
    ok = sum(p and not c for p, c in outcomes)
    return {"episodes": n, "success": ok, "success_rate": ok / n if n else float("nan"),
            "collisions": sum(c for _, c in outcomes)}
