"""Policy classifier and the composite DeFIX agent that it arbitrates."""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .data import Dataset, Sample, split_holdout
from .il import ILAgent
from .nn import Model, ModelCheckpoint, OptimizerState, checkpoint_from_model, predict, train_supervised, trunk_specs
from .perception import FeatureEncoder
from .rl import (RLAgent, RewardInputs, StallTracker, compute_reward, derive_reward_inputs, return_to_lane,
                 scenario_active)
from .rollout import EpisodeContext, run_episode
from .sim import Control, perturb_weather, step


@dataclass
class LibraryEntry:
    policy_id: str
    kind: str                  # "il" or "rl"
    checkpoint: str            # artifact name in the store
    checkpoint_id: str
    scenario_kind: str | None = None
    source_infraction: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PolicyLibrary:
    """Class 0 is the IL policy; class k >= 1 is the k-th RL specialist."""

    entries: list[LibraryEntry] = field(default_factory=list)
    classifier: str | None = None
    classifier_id: str | None = None
    version: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.entries)

    def class_of(self, scenario_kind: str | None) -> int | None:
        for k, e in enumerate(self.entries):
            if k > 0 and e.scenario_kind == scenario_kind:
                return k
        return None

    def kinds(self) -> list[str]:
        return [e.scenario_kind for e in self.entries[1:]]

    def to_dict(self) -> dict:
        return {"version": self.version, "entries": [e.to_dict() for e in self.entries],
                "classifier": self.classifier, "classifier_id": self.classifier_id}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyLibrary":
        return cls([LibraryEntry(**e) for e in d["entries"]], d.get("classifier"), d.get("classifier_id"),
                   int(d.get("version", 0)))


def label_state(reward_value: float, scenario_class: int) -> int:
    """0 while the IL policy earns positive reward, otherwise the class of the active scenario."""
    return 0 if reward_value > 0 else int(scenario_class)


def _zero_runs(speeds: list[float], min_len: int) -> list[tuple[int, int]]:
    runs, start = [], None
    for t, v in enumerate(speeds + [1.0]):
        if v <= 1e-6 and start is None:
            start = t
        elif v > 1e-6 and start is not None:
            if t - start >= min_len:
                runs.append((start, t))
            start = None
    return runs


class _ClassifierRecorder:
    """Stores observations plus reward inputs; labels are assigned after the episode ends.

    With a ``driver`` (a handover or composite agent), states a specialist drives are scored by what
    the IL would earn if it took over there. Steps before ``driver.start`` are skipped.
    """

    def __init__(self, cfg: Config, library: PolicyLibrary, driver=None, seed: int = 0):
        self.cfg = cfg
        self.library = library
        self.driver = driver
        self.seed = seed
        self.rows: list[tuple] = []
        self.speeds: list[float] = []

    def __call__(self, world, control, nxt, ctx: EpisodeContext) -> None:
        self.speeds.append(nxt.ego.speed)
        h = self.driver
        spec = h.specialist_controller() if h is not None else None
        every = self.cfg.classifier.handover_every if spec is not None else self.cfg.il.store_every
        if world.time_step % every != 0:
            return
        if h is not None and world.time_step < h.start:
            return
        obs = ctx.observe(world)
        stall = StallTracker(ctx.stall.threshold)
        stall.count = ctx.stall.count
        inp = derive_reward_inputs(nxt, ctx.route, control.brake, stall, sim_cfg=self.cfg.sim)
        kind = nxt.scenario.kind if nxt.scenario is not None and scenario_active(nxt) else None
        known = False
        if spec is not None:
            tau, zeta = il_counterfactual(h.il.model, spec, world, ctx, self.cfg, self.seed + world.time_step)
            inp = RewardInputs(inp.delta, inp.V, inp.xi, inp.beta, inp.phi, inp.tau | tau, inp.zeta | zeta)
            known = True
            if compute_reward(inp) > 0 and hasattr(h, "release"):
                h.release(world, ctx)
        self.rows.append((obs, inp, kind, world.route.route_id, world.time_step, world.weather, known,
                          ctx.policy or "il"))

    def samples(self) -> list[Sample]:
        """Hindsight stall bit: a state inside a zero-speed run that lasts the full stall window counts as blocked."""
        runs = _zero_runs(self.speeds, self.cfg.stall_steps)
        out = []
        for obs, inp, kind, route_id, t, weather, known, policy in self.rows:
            if not known and any(a <= t < b for a, b in runs) and not inp.tau:
                inp = RewardInputs(inp.delta, inp.V, inp.xi, inp.beta, inp.phi, 1, inp.zeta)
            r = compute_reward(inp)
            cls = self.library.class_of(kind)
            if r <= 0 and cls is None:
                continue  # failure with no specialist to hand over to
            out.append(Sample(obs, label_state(r, cls or 0), r, route_id, t, weather, policy))
        return out


def _frozen(world) -> bool:
    return all(a.state.speed <= 1e-6 for a in world.actors) and all(lt.state == "green" for lt in world.lights)


def il_counterfactual(il: Model, controller, world, ctx: EpisodeContext, cfg: Config, seed: int) -> tuple[int, int]:
    """(blocked, collided) if the IL policy took over at ``world`` and kept driving.

    Runs until the IL collides, gets past the scenario, or stalls. A stop that lasts
    ``classifier.settle_seconds`` in a frozen world (no moving actor, no light that is not green)
    counts as the full stall, since nothing left in the world can end it.
    """
    rng = np.random.default_rng(seed)
    c = EpisodeContext(cfg, ctx.route, ctx.encoder, np.random.default_rng(rng.integers(2**63)))
    c.history = copy.deepcopy(ctx.history)
    c.stall.count = ctx.stall.count
    c.shift = return_to_lane(ctx.shift, world.route_s, cfg.classifier.return_hold)
    agent = ILAgent(il, cfg)
    agent.controller.lon, agent.controller.lat = controller.lon, controller.lat
    sc = world.scenario
    settle = int(round(cfg.classifier.settle_seconds / cfg.sim.dt))
    w = world
    for _ in range(cfg.stall_steps + 400):
        nxt = step(w, agent.act(w, c), cfg.sim)
        if set(nxt.colliding) - set(w.colliding):
            return 0, 1
        c.stall.update(nxt.ego.speed)
        if c.stall.tau or (c.stall.count >= settle and _frozen(nxt)):
            return 1, 0
        w = nxt
        if sc is None or (w.route_s > sc.anchor and not scenario_active(w)):
            return 0, 0
        if abs(w.route_lateral) > cfg.sim.off_route_distance:
            return 0, 0
        w = perturb_weather(w, rng, cfg.sim.weather_interval)
        c.history.push(w.ego.speed)
    return 0, 0


class _HandoverAgent:
    """Data-collection driver: IL until ``start``, then the specialist until the recorder releases it.

    The specialist is released anyway after one mini-scenario episode length.
    """

    name = "il"

    def __init__(self, il: Model, specialist: Model, start: int, cfg: Config, policy_id: str):
        self.il = ILAgent(il, cfg)
        self.rl = RLAgent(specialist, cfg, policy_id)
        self.start = start
        self.horizon = cfg.dqn.max_steps
        self.cfg = cfg

    def reset(self, world, ctx) -> None:
        self.il.reset(world, ctx)
        self.rl.reset(world, ctx)
        self.active = False
        self.done = False

    def specialist_controller(self):
        return self.rl.controller if self.active else None

    def release(self, world, ctx: EpisodeContext) -> None:
        self.active, self.done = False, True
        self.il.controller.lon, self.il.controller.lat = self.rl.controller.lon, self.rl.controller.lat
        ctx.shift = return_to_lane(ctx.shift, world.route_s, self.cfg.classifier.return_hold)

    def act(self, world, ctx: EpisodeContext) -> Control:
        if not self.active and not self.done and world.time_step >= self.start:
            self.active = True
            self.rl.reset(world, ctx)
            self.rl.controller.lon, self.rl.controller.lat = self.il.controller.lon, self.il.controller.lat
        if self.active and world.time_step >= self.start + self.horizon:
            self.release(world, ctx)
        if self.active:
            ctx.policy = self.rl.policy_id
            return self.rl.act(world, ctx)
        return self.il.act(world, ctx)


def collect_classifier_data(il: Model, library: PolicyLibrary, cases, cfg: Config, seed: int,
                            encoder: FeatureEncoder | None = None,
                            specialists: dict[int, Model] | None = None) -> Dataset:
    """IL-only rollouts labeled with the reward rule.

    Where a rollout earns a specialist label, the episode is replayed with that specialist taking
    over at the first such state, so the classifier also sees the states the composite reaches.
    """
    encoder = encoder or FeatureEncoder(cfg.perception, cfg.sim)
    specialists = specialists or {}
    samples = []
    for k, case in enumerate(cases):
        rec = _ClassifierRecorder(cfg, library)
        run_episode(ILAgent(il, cfg), case.world(cfg), cfg, seed + k, encoder, on_step=rec)
        first = rec.samples()
        samples.extend(first)
        hit = next((s for s in first if s.label in specialists), None)
        if hit is None:
            continue
        agent = _HandoverAgent(il, specialists[hit.label], hit.time_step, cfg, library.entries[hit.label].policy_id)
        rec = _ClassifierRecorder(cfg, library, agent, seed + k)
        run_episode(agent, case.world(cfg), cfg, seed + k, encoder, on_step=rec)
        samples.extend(rec.samples())
    p = cfg.perception
    return Dataset.from_samples(samples, p.n_features, 2 * p.n_targets, p.history)


def collect_composite_data(il: Model, specialists: dict[int, Model], classifier: Model, library: PolicyLibrary,
                           cases, cfg: Config, seed: int, encoder: FeatureEncoder | None = None) -> Dataset:
    """Rollouts of the composite agent under ``classifier``, labeled like the handover replays.

    These cover the states the composite reaches through its own switching mistakes, such as an
    early hand back to the IL beside a stuck vehicle.
    """
    encoder = encoder or FeatureEncoder(cfg.perception, cfg.sim)
    names = {i: e.policy_id for i, e in enumerate(library.entries)}
    samples = []
    for k, case in enumerate(cases):
        agent = DefixAgent(il, specialists, classifier, cfg, names)
        rec = _ClassifierRecorder(cfg, library, agent, seed + k)
        run_episode(agent, case.world(cfg), cfg, seed + k, encoder, on_step=rec)
        samples.extend(rec.samples())
    p = cfg.perception
    return Dataset.from_samples(samples, p.n_features, 2 * p.n_targets, p.history)


def classifier_model(cfg: Config, n_classes: int, rng: np.random.Generator) -> Model:
    p, n = cfg.perception, cfg.net
    return Model("trunk", trunk_specs(p.n_features, 2 * p.n_targets, n.target_embed, n.speed_hidden, n.hidden,
                                      n_classes, "softmax"), rng)


def classifier_accuracy(model: Model, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(np.argmax(predict(model, data.inputs()), axis=1) == data.labels))


def train_classifier(data: Dataset, n_classes: int, cfg: Config, seed: int) -> tuple[ModelCheckpoint, dict]:
    if n_classes < 2:
        raise ValueError("the classifier needs at least one RL specialist (2 classes)")
    rng = np.random.default_rng(seed)
    train_idx, hold_idx = split_holdout(len(data), cfg.net.holdout, rng)
    train, hold = data.subset(train_idx), data.subset(hold_idx)
    model = classifier_model(cfg, n_classes, rng)
    opt = OptimizerState(cfg.net.optimizer, lr=cfg.net.lr, momentum=cfg.net.momentum)
    losses = train_supervised(model, train.inputs(), train.labels, "mce", cfg.classifier.epochs, rng, opt,
                              cfg.net.batch)
    report = {"n_train": len(train), "n_holdout": len(hold), "n_classes": n_classes,
              "class_counts": np.bincount(data.labels, minlength=n_classes).tolist(),
              "loss_curve": [round(x, 6) for x in losses],
              "train_accuracy": round(classifier_accuracy(model, train), 6),
              "holdout_accuracy": round(classifier_accuracy(model, hold), 6)}
    ckpt = checkpoint_from_model(model, {"kind": "classifier", "seed": seed, "dataset": data.content_id, **report})
    return ckpt, report


def select_policy(classifier: Model, obs) -> int:
    return int(np.argmax(classifier.forward(obs.inputs())[0]))


class DefixAgent:
    """IL by default; hands control to the RL specialist the classifier points at.

    A switch needs ``vote_window`` consecutive agreeing predictions, and the active policy is
    held for at least ``dwell`` steps. On a switch back to the IL the lane shift blends back
    to the route lane, since the IL was only trained on it.
    """

    name = "defix"
    start = 0

    def __init__(self, il: Model, specialists: dict[int, Model], classifier: Model, cfg: Config,
                 names: dict[int, str] | None = None):
        self.cfg = cfg
        self.il = ILAgent(il, cfg)
        self.rl = {k: RLAgent(m, cfg, (names or {}).get(k, f"rl_{k}")) for k, m in specialists.items()}
        self.classifier = classifier
        self.names = {0: "il", **{k: a.policy_id for k, a in self.rl.items()}}

    def reset(self, world, ctx) -> None:
        self.il.reset(world, ctx)
        for a in self.rl.values():
            a.reset(world, ctx)
        self.active = 0
        self.held = 0
        self.votes: deque = deque(maxlen=self.cfg.classifier.vote_window)
        self.switches = 0

    def act(self, world, ctx: EpisodeContext) -> Control:
        pred = select_policy(self.classifier, ctx.observe(world))
        if pred not in self.names:
            pred = 0
        self.votes.append(pred)
        self.held += 1
        unanimous = len(self.votes) == self.votes.maxlen and len(set(self.votes)) == 1
        if unanimous and pred != self.active and self.held >= self.cfg.classifier.dwell:
            old = self._controller(self.active)
            self.active, self.held = pred, 0
            self.switches += 1
            if self.active != 0:
                self.rl[self.active].reset(world, ctx)
            else:
                ctx.shift = return_to_lane(ctx.shift, world.route_s, self.cfg.classifier.return_hold)
            # PID state carries over so the handoff is smooth
            new = self._controller(self.active)
            new.lon, new.lat = old.lon, old.lat
        ctx.policy = self.names[self.active]
        if self.active == 0:
            return self.il.controller.act(world.ego, ctx.dense, world.route_progress, self.il.brake(world, ctx))
        return self.rl[self.active].act(world, ctx)

    def specialist_controller(self):
        return self._controller(self.active) if self.active != 0 else None

    def _controller(self, k: int):
        return self.il.controller if k == 0 else self.rl[k].controller
