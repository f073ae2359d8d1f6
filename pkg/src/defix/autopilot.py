"""Rule-based demonstrator: follow the route, brake on privileged hazards."""

from __future__ import annotations

from .config import Config
from .control import make_controller
from .data import Dataset, Sample
from .perception import FeatureEncoder
from .rl import StallTracker, compute_reward, derive_reward_inputs
from .rollout import EpisodeContext, EpisodeResult, run_episode
from .sim import Control, WorldState, privileged_hazard


def autopilot_act(world: WorldState, controller, dense, cfg: Config) -> Control:
    phi, _ = privileged_hazard(world, cfg.sim)
    return controller.act(world.ego, dense, world.route_progress, phi)


class AutopilotAgent:
    name = "autopilot"

    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.controller = make_controller(cfg.control, cfg.sim.dt, cfg.sim.max_steer)

    def reset(self, world, ctx) -> None:
        self.controller.reset()

    def act(self, world: WorldState, ctx: EpisodeContext) -> Control:
        ctx.policy = self.name
        return autopilot_act(world, self.controller, ctx.dense, self.cfg)


class SampleRecorder:
    """Step callback storing an observation every ``every`` ticks.

    ``label_fn(world, control, ctx)`` supplies the label; the stored reward is computed on the
    pre-step state with the executed brake bit.
    """

    def __init__(self, cfg: Config, label_fn, every: int | None = None):
        self.cfg = cfg
        self.every = cfg.il.store_every if every is None else every
        self.label_fn = label_fn
        self.samples: list[Sample] = []

    def __call__(self, world, control, nxt, ctx) -> None:
        if world.time_step % self.every != 0:
            return
        obs = ctx.observe(world)
        stall = StallTracker(ctx.stall.threshold)
        stall.count = ctx.stall.count
        reward = compute_reward(derive_reward_inputs(nxt, ctx.route, control.brake, stall, sim_cfg=self.cfg.sim))
        self.samples.append(Sample(obs, int(self.label_fn(world, control, ctx)), reward, world.route.route_id,
                                   world.time_step, world.weather, ctx.policy))


def collect_demonstrations(cases, cfg: Config, seed: int, encoder: FeatureEncoder | None = None,
                           n_target: int | None = None) -> tuple[Dataset, list[EpisodeResult]]:
    """Roll the autopilot over ``cases`` and keep (observation, brake) pairs: the D0 dataset.

    Routes are reused with fresh seeds until ``n_target`` samples are stored.
    """
    encoder = encoder or FeatureEncoder(cfg.perception, cfg.sim)
    n_target = cfg.il.n_target if n_target is None else n_target
    rec = SampleRecorder(cfg, lambda w, c, ctx: int(c.brake))
    results = []
    k = 0
    while len(rec.samples) < n_target:
        case = cases[k % len(cases)]
        results.append(run_episode(AutopilotAgent(cfg), case.world(cfg), cfg, seed + k, encoder, on_step=rec))
        k += 1
        if k > 50 * len(cases):
            break
    p = cfg.perception
    return Dataset.from_samples(rec.samples[:n_target], p.n_features, 2 * p.n_targets, p.history), results
