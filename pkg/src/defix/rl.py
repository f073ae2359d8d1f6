"""DQN over high-level driving commands, plus the reward used framework-wide."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .config import Config, DQNConfig, SimConfig
from .control import make_controller
from .nn import Model, ModelCheckpoint, OptimizerState, checkpoint_from_model, check_finite_grads, mlp_specs
from .perception import SPEED_SCALE, FeatureEncoder, SpeedHistory
from .sim import (VEHICLE_HALF, Control, ScenarioTemplate, Route, WorldState, perturb_weather,
                  privileged_hazard, route_from_dict, route_to_dict, spawn_scenario, step)

log = logging.getLogger(__name__)

COLLISION_PENALTY = 1500.0
STALL_PENALTY = 100.0
HAZARD_BRAKE_BONUS = 50.0
# route window around a scenario anchor in which that scenario counts as active
ACTIVE_BEFORE, ACTIVE_AFTER = 40.0, 20.0


class DivergenceError(FloatingPointError):
    pass


class HighLevelAction(IntEnum):
    STOP = 0
    LANE_KEEP = 1
    LANE_CHANGE_LEFT = 2
    LANE_CHANGE_RIGHT = 3


N_ACTIONS = len(HighLevelAction)


@dataclass(frozen=True)
class RewardInputs:
    delta: float
    V: float
    xi: int = 0
    beta: int = 0
    phi: int = 0
    tau: int = 0
    zeta: int = 0

    def __post_init__(self):
        for name in ("delta", "V"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        for name in ("xi", "beta", "phi", "tau", "zeta"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")
        if self.delta < 0 or self.V < 0:
            raise ValueError("delta and V must be >= 0")


def compute_reward(inp: RewardInputs) -> float:
    d, v, xi, b, phi, tau, zeta = inp.delta, inp.V, inp.xi, inp.beta, inp.phi, inp.tau, inp.zeta
    return (d + (1 - xi) * ((1 - phi) * v + HAZARD_BRAKE_BONUS * phi * b - phi * v)
            + xi * v - STALL_PENALTY * tau - COLLISION_PENALTY * zeta)


class StallTracker:
    """Counts consecutive zero-speed steps."""

    def __init__(self, threshold: int = 1200):
        self.threshold = threshold
        self.count = 0

    def update(self, speed: float) -> int:
        self.count = self.count + 1 if speed <= 1e-6 else 0
        return self.count

    @property
    def tau(self) -> int:
        return int(self.count >= self.threshold)


def scenario_active(world: WorldState, kind: str | None = None) -> bool:
    sc = world.scenario
    if sc is None or (kind is not None and sc.kind != kind):
        return False
    return sc.anchor - ACTIVE_BEFORE <= world.route_s <= sc.anchor + ACTIVE_AFTER


def stuck_xi(world: WorldState) -> int:
    return int(scenario_active(world, "stuck_vehicle"))


def derive_reward_inputs(world: WorldState, route: Route, brake: bool, stall: StallTracker,
                         xi: int | None = None, sim_cfg: SimConfig | None = None) -> RewardInputs:
    wp = route.dense[world.route_progress]
    delta = math.hypot(world.ego.x - wp[0], world.ego.y - wp[1])
    phi, _ = privileged_hazard(world, sim_cfg)
    return RewardInputs(delta, world.ego.speed, stuck_xi(world) if xi is None else int(xi), int(bool(brake)),
                        int(phi), stall.tau, int(world.collision_flag))


# --- high-level commands ----------------------------------------------------------------------


@dataclass(frozen=True)
class LaneShift:
    """Lateral offset of the followed route, blended linearly from ``start`` to ``target``.

    Past ``back_s`` the offset blends back to the route lane over the same distance.
    """

    target: float = 0.0
    start: float = 0.0
    blend_s: float = 0.0
    blend: float = 12.0
    back_s: float = math.inf

    @property
    def final(self) -> float:
        return self.target if math.isinf(self.back_s) else 0.0

    def offset_at(self, s):
        s = np.asarray(s, dtype=float)
        frac = np.clip((s - self.blend_s) / self.blend, 0.0, 1.0)
        off = self.start + (self.target - self.start) * frac
        if math.isinf(self.back_s):
            return off
        return off * (1.0 - np.clip((s - self.back_s) / self.blend, 0.0, 1.0))


def return_to_lane(shift: LaneShift, s: float, hold: float = 0.0) -> LaneShift:
    """Finish the lane change under way, keep that offset for ``hold`` metres, then blend back to the route lane.

    The return never starts before ``s``, so the offset stays continuous.
    """
    if shift.final == 0.0 and shift.target == 0.0:
        return shift
    return replace(shift, back_s=min(shift.back_s, max(float(s), shift.blend_s + shift.blend) + hold))


def shifted_dense(route: Route, shift: LaneShift) -> np.ndarray:
    if shift.target == 0.0 and shift.start == 0.0:
        return route.dense
    return route.dense + shift.offset_at(route.cum_s)[:, None] * route.normals


def apply_high_level(action: HighLevelAction, route: Route, ego_s: float, shift: LaneShift,
                     cfg: DQNConfig | None = None, limit: float | None = None,
                     speed: float | None = None) -> tuple[bool, LaneShift, np.ndarray]:
    """Map a command to (brake, new lane shift, waypoints to track)."""
    cfg = cfg or DQNConfig()
    limit = cfg.lane_shift if limit is None else limit
    action = HighLevelAction(int(action))
    if action == HighLevelAction.STOP:
        return True, shift, shifted_dense(route, shift)
    if action in (HighLevelAction.LANE_CHANGE_LEFT, HighLevelAction.LANE_CHANGE_RIGHT):
        if cfg.restrict_lane_change_to_motion and (speed or 0.0) < 0.1:
            return False, shift, shifted_dense(route, shift)
        sign = 1.0 if action == HighLevelAction.LANE_CHANGE_LEFT else -1.0
        wanted = shift.final + sign * cfg.lane_shift
        target = float(np.clip(wanted, -limit, limit))
        if target != wanted:
            log.debug("lane change clamped to corridor edge (%.2f m requested, %.2f m applied)", wanted, target)
        if target != shift.final:
            shift = LaneShift(target, float(shift.offset_at(ego_s)), ego_s, cfg.blend)
    return False, shift, shifted_dense(route, shift)


N_PROPRIO = 3


def rl_observation(features: np.ndarray, speed: float, shift: LaneShift, s: float, limit: float) -> np.ndarray:
    """Sensor features plus speed and the agent's own lane-shift command (target and current offset)."""
    extra = [speed * SPEED_SCALE, shift.final / limit, float(shift.offset_at(s)) / limit]
    return np.concatenate([features, extra])


def rl_act(model: Model, obs: np.ndarray) -> HighLevelAction:
    q = model.forward(np.asarray(obs)[None, :])[0]
    return HighLevelAction(int(np.argmax(q)))


def epsilon_greedy(q: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    if rng.random() < eps:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def epsilon_at(step_count: int, cfg: DQNConfig) -> float:
    frac = min(step_count / max(cfg.eps_steps, 1), 1.0)
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac


# --- mini-scenarios -----------------------------------------------------------------------------


@dataclass
class MiniScenario:
    source_infraction: str
    template: ScenarioTemplate | None
    route_segment: Route
    failure_s: float
    spawn_offset_range: tuple[float, float] = (3.0, 10.0)
    max_steps: int = 250
    kind: str = "stuck_vehicle"

    def __post_init__(self):
        lo, hi = self.spawn_offset_range
        if not (3.0 <= lo <= hi <= 10.0):
            raise ValueError("spawn offset range must lie within [3, 10] m")

    def to_dict(self) -> dict:
        return {"source_infraction": self.source_infraction,
                "template": None if self.template is None else self.template.to_dict(),
                "route_segment": route_to_dict(self.route_segment), "failure_s": self.failure_s,
                "spawn_offset_range": list(self.spawn_offset_range), "max_steps": self.max_steps,
                "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "MiniScenario":
        return cls(d["source_infraction"],
                   None if d["template"] is None else ScenarioTemplate.from_dict(d["template"]),
                   route_from_dict(d["route_segment"]), float(d["failure_s"]),
                   tuple(d["spawn_offset_range"]), int(d["max_steps"]), d.get("kind", "stuck_vehicle"))

    @property
    def scenario_id(self) -> str:
        from .sim import canonical_json
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]


@dataclass
class Transition:
    obs_features: np.ndarray
    action: int
    reward: float
    next_obs_features: np.ndarray
    done: bool


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._next = 0

    def add(self, t: Transition) -> None:
        i = self._next
        self.obs[i], self.actions[i], self.rewards[i] = t.obs_features, t.action, t.reward
        self.next_obs[i], self.dones[i] = t.next_obs_features, t.done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        return rng.integers(0, self.size, size=batch)

    def __len__(self) -> int:
        return self.size


def bellman_targets(rewards, next_q_target, dones, gamma: float) -> np.ndarray:
    return np.asarray(rewards) + gamma * (1.0 - np.asarray(dones, dtype=float)) * np.max(next_q_target, axis=1)


def huber_grad(err: np.ndarray, delta: float = 1.0) -> np.ndarray:
    return np.clip(err, -delta, delta)


class MiniScenarioEnv:
    """Episodic wrapper: one decision holds for ``decision_interval`` sim steps."""

    def __init__(self, scenario: MiniScenario, cfg: Config, encoder: FeatureEncoder | None = None):
        self.sc = scenario
        self.cfg = cfg
        self.encoder = encoder or FeatureEncoder(cfg.perception, cfg.sim)
        self.controller = make_controller(cfg.control, cfg.sim.dt, cfg.sim.max_steer)
        self.limit = cfg.sim.corridor_half_width - cfg.sim.lane_width / 2
        tpl = scenario.template
        self.pass_s = None if tpl is None else tpl.anchor + 2 * VEHICLE_HALF[0] + 1.0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.sc.spawn_offset_range
        ego_s = max(self.sc.failure_s - float(rng.uniform(lo, hi)), 0.0)
        self.world = spawn_scenario(self.sc.route_segment, self.sc.template, int(rng.integers(2**31)),
                                    ego_s=ego_s, cfg=self.cfg.sim)
        self.rng = rng
        self.shift = LaneShift(blend=self.cfg.dqn.blend)
        self.dense = self.sc.route_segment.dense
        self.controller.reset()
        self.stall = StallTracker(self.cfg.stall_steps)
        self.steps = 0
        self.passed = False
        self.collided = False
        self.world = perturb_weather(self.world, rng, self.cfg.sim.weather_interval)
        return self.observe()

    def observe(self) -> np.ndarray:
        w = self.world
        return rl_observation(self.encoder.encode(w, self.rng), w.ego.speed, self.shift, w.route_s, self.limit)

    def xi(self) -> int:
        return int(self.sc.kind == "stuck_vehicle")

    def step(self, action: int) -> tuple[np.ndarray, float, bool, dict]:
        brake, self.shift, self.dense = apply_high_level(
            HighLevelAction(action), self.sc.route_segment, self.world.route_s, self.shift, self.cfg.dqn,
            self.limit, self.world.ego.speed)
        total = 0.0
        done = False
        for _ in range(self.cfg.dqn.decision_interval):
            ctl = self.controller.act(self.world.ego, self.dense, self.world.route_progress, brake)
            self.world = step(self.world, ctl, self.cfg.sim)
            self.steps += 1
            self.stall.update(self.world.ego.speed)
            inp = derive_reward_inputs(self.world, self.sc.route_segment, brake, self.stall, self.xi(),
                                       self.cfg.sim)
            total += compute_reward(inp)
            if self.pass_s is not None and self.world.route_s >= self.pass_s:
                self.passed = True
            if self.world.collision_flag:
                self.collided = True
                done = True
                break
            if self.steps >= self.sc.max_steps or \
                    self.world.route_covered >= self.sc.route_segment.length - 1.0:
                done = True
                break
            self.world = perturb_weather(self.world, self.rng, self.cfg.sim.weather_interval)
        return self.observe(), total, done, {"passed": self.passed, "collided": self.collided}

    @property
    def success(self) -> bool:
        return self.passed and not self.collided


def q_network(cfg: Config, rng: np.random.Generator) -> Model:
    h = cfg.dqn.hidden
    return Model("mlp", mlp_specs([cfg.perception.n_features + N_PROPRIO, h, h, N_ACTIONS]), rng)


def dqn_update(q: Model, target: Model, buf: ReplayBuffer, opt: OptimizerState, rng: np.random.Generator,
               cfg: DQNConfig) -> float:
    idx = buf.sample_indices(rng, cfg.batch)
    next_q = target.forward(buf.next_obs[idx])
    if cfg.double:
        # online net picks the next action, target net scores it
        pick = np.argmax(q.forward(buf.next_obs[idx]), axis=1)
        masked = np.full_like(next_q, -np.inf)
        masked[np.arange(len(idx)), pick] = next_q[np.arange(len(idx)), pick]
        next_q = masked
    y = bellman_targets(buf.rewards[idx], next_q, buf.dones[idx], cfg.gamma)
    q.zero_grad()
    pred = q.forward(buf.obs[idx])
    if not np.all(np.isfinite(pred)):
        raise DivergenceError("non-finite Q-values during training")
    rows = np.arange(len(idx))
    err = pred[rows, buf.actions[idx]] - y
    dq = np.zeros_like(pred)
    dq[rows, buf.actions[idx]] = huber_grad(err) / len(idx)
    q.backward(dq)
    check_finite_grads(q)
    opt.step(q.params(), q.grads())
    return float(np.mean(np.minimum(0.5 * err ** 2, np.abs(err) - 0.5)))


def run_greedy_episode(model: Model, env: MiniScenarioEnv, rng: np.random.Generator) -> tuple[float, bool]:
    obs = env.reset(rng)
    ret, done = 0.0, False
    while not done:
        obs, r, done, _ = env.step(int(rl_act(model, obs)))
        ret += r
    return ret, env.success


def dqn_train(scenario: MiniScenario, cfg: Config, seed: int, encoder: FeatureEncoder | None = None,
              episodes: int | None = None, progress=None) -> ModelCheckpoint:
    """Train a Q-network on one mini-scenario; the training curve goes into the checkpoint metadata.

    Every ``val_every`` episodes the greedy policy is scored on a fixed validation seed set and the
    best-scoring weights are returned.
    """
    dcfg = cfg.dqn
    rng = np.random.default_rng(seed)
    val_seeds = np.random.default_rng([seed, 1]).integers(2**31, size=dcfg.val_episodes)
    best, best_score, best_ep, validation = None, None, -1, []
    env = MiniScenarioEnv(scenario, cfg, encoder)
    q = q_network(cfg, rng)
    target = q.copy()
    opt = OptimizerState("adam", lr=dcfg.lr)
    buf = ReplayBuffer(dcfg.buffer, cfg.perception.n_features + N_PROPRIO)
    curve = []
    decisions = updates = 0
    n_episodes = dcfg.episodes if episodes is None else episodes
    for ep in range(n_episodes):
        obs = env.reset(rng)
        ret, done = 0.0, False
        while not done:
            eps = epsilon_at(decisions, dcfg)
            qv = q.forward(obs[None, :])[0]
            if not np.all(np.isfinite(qv)):
                raise DivergenceError(f"non-finite Q-values at episode {ep}")
            a = epsilon_greedy(qv, eps, rng)
            nxt, r, done, _ = env.step(a)
            buf.add(Transition(obs, a, r * dcfg.reward_scale, nxt, done))
            obs = nxt
            ret += r
            decisions += 1
            if len(buf) >= min(dcfg.warmup, dcfg.buffer):
                dqn_update(q, target, buf, opt, rng, dcfg)
                updates += 1
                if updates % dcfg.target_sync == 0:
                    target = q.copy()
        curve.append([ep, round(ret, 4), bool(env.success)])
        if progress is not None:
            progress(ep, ret, env.success)
        if (dcfg.val_every and (ep + 1) % dcfg.val_every == 0) or ep + 1 == n_episodes:
            val_env = MiniScenarioEnv(scenario, cfg, env.encoder)
            runs = [run_greedy_episode(q, val_env, np.random.default_rng(int(s))) for s in val_seeds]
            score = (sum(ok for _, ok in runs), float(np.mean([r for r, _ in runs])))
            validation.append([ep, score[0], round(score[1], 4)])
            if best_score is None or score > best_score:
                best, best_score, best_ep = q.copy(), score, ep
    meta = {"kind": "dqn", "scenario": scenario.scenario_id, "scenario_kind": scenario.kind, "seed": seed,
            "episodes": n_episodes, "decisions": decisions, "updates": updates, "curve": curve,
            "validation": validation, "selected_episode": best_ep}
    return checkpoint_from_model(best, meta)


class RLAgent:
    """Drives with a trained Q-network; decisions are held for ``decision_interval`` steps."""

    name = "rl"

    def __init__(self, model: Model, cfg: Config, policy_id: str = "rl"):
        self.model = model
        self.cfg = cfg
        self.policy_id = policy_id
        self.controller = make_controller(cfg.control, cfg.sim.dt, cfg.sim.max_steer)
        self.limit = cfg.sim.corridor_half_width - cfg.sim.lane_width / 2

    def reset(self, world, ctx) -> None:
        self.controller.reset()
        self._action = HighLevelAction.LANE_KEEP
        self._age = 0

    def decide(self, world, ctx) -> None:
        obs = rl_observation(ctx.features(world), world.ego.speed, ctx.shift, world.route_s, self.limit)
        self._action = rl_act(self.model, obs)
        self._age = 0

    def act(self, world, ctx) -> Control:
        if self._age % self.cfg.dqn.decision_interval == 0:
            self.decide(world, ctx)
        self._age += 1
        brake, ctx.shift, _ = apply_high_level(self._action, ctx.route, world.route_s, ctx.shift, self.cfg.dqn,
                                               self.limit, world.ego.speed)
        return self.controller.act(world.ego, ctx.dense, world.route_progress, brake)
