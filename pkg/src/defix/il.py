"""Imitation-learned brake policy: behavior cloning plus DAgger."""

from __future__ import annotations

import numpy as np

from .autopilot import SampleRecorder
from .config import Config
from .control import make_controller
from .data import Dataset, split_holdout
from .nn import Model, ModelCheckpoint, OptimizerState, checkpoint_from_model, predict, train_supervised, trunk_specs
from .perception import FeatureEncoder, Observation
from .rollout import EpisodeContext, run_episode
from .sim import Control, privileged_hazard


def il_model(cfg: Config, rng: np.random.Generator) -> Model:
    p, n = cfg.perception, cfg.net
    return Model("trunk", trunk_specs(p.n_features, 2 * p.n_targets, n.target_embed, n.speed_hidden, n.hidden,
                                      1, "sigmoid"), rng)


def brake_probability(model: Model, obs: Observation) -> float:
    return float(model.forward(obs.inputs())[0, 0])


def il_act(model: Model, obs: Observation, threshold: float = 0.5) -> bool:
    return brake_probability(model, obs) > threshold


class ILAgent:
    """Brake decision from the network, steering and throttle from the shared PID pair."""

    name = "il"

    def __init__(self, model: Model, cfg: Config):
        self.model = model
        self.cfg = cfg
        self.controller = make_controller(cfg.control, cfg.sim.dt, cfg.sim.max_steer)

    def reset(self, world, ctx) -> None:
        self.controller.reset()

    def brake(self, world, ctx: EpisodeContext) -> bool:
        return il_act(self.model, ctx.observe(world), self.cfg.il.brake_threshold)

    def act(self, world, ctx: EpisodeContext) -> Control:
        ctx.policy = self.name
        return self.controller.act(world.ego, ctx.dense, world.route_progress, self.brake(world, ctx))


def _opt(cfg: Config) -> OptimizerState:
    return OptimizerState(cfg.net.optimizer, lr=cfg.net.lr, momentum=cfg.net.momentum)


def class_weights(labels: np.ndarray) -> np.ndarray:
    pos = max(float(np.mean(labels)), 1e-6)
    w = np.where(labels == 1, 0.5 / pos, 0.5 / max(1.0 - pos, 1e-6))
    return w / w.mean()


def brake_agreement(model: Model, data: Dataset, threshold: float = 0.5) -> float:
    if len(data) == 0:
        return float("nan")
    p = predict(model, data.inputs())[:, 0]
    return float(np.mean((p > threshold).astype(int) == data.labels))


def train_brake_classifier(data: Dataset, cfg: Config, seed: int, init: ModelCheckpoint | None = None,
                           epochs: int | None = None, lr: float | None = None) -> tuple[ModelCheckpoint, dict]:
    """Fit the brake network with BCE; reports agreement on a held-out split.

    With ``init`` the weights continue from that checkpoint (DAgger warm start).
    """
    rng = np.random.default_rng(seed)
    train_idx, hold_idx = split_holdout(len(data), cfg.net.holdout, rng)
    train, hold = data.subset(train_idx), data.subset(hold_idx)
    model = init.build() if init is not None else il_model(cfg, rng)
    labels = train.labels.astype(float)
    weights = class_weights(train.labels) if cfg.il.class_reweight else None
    epochs = cfg.net.epochs if epochs is None else epochs
    opt = _opt(cfg) if lr is None else OptimizerState(cfg.net.optimizer, lr=lr, momentum=cfg.net.momentum)
    losses = train_supervised(model, train.inputs(), labels, "bce", epochs, rng, opt, cfg.net.batch, weights)
    report = {"n_train": len(train), "n_holdout": len(hold), "loss_curve": [round(x, 6) for x in losses],
              "train_agreement": round(brake_agreement(model, train, cfg.il.brake_threshold), 6),
              "holdout_agreement": round(brake_agreement(model, hold, cfg.il.brake_threshold), 6),
              "brake_fraction": round(float(np.mean(data.labels)) if len(data) else 0.0, 6)}
    ckpt = checkpoint_from_model(model, {"kind": "il", "seed": seed, "dataset": data.content_id, **report})
    return ckpt, report


def collect_dagger(model: Model, cases, cfg: Config, seed: int, encoder: FeatureEncoder | None = None,
                   ) -> tuple[Dataset, list]:
    """The IL policy drives; every stored state is labeled with the autopilot's brake decision."""
    encoder = encoder or FeatureEncoder(cfg.perception, cfg.sim)
    rec = SampleRecorder(cfg, lambda w, c, ctx: int(privileged_hazard(w, cfg.sim)[0]))
    results = [run_episode(ILAgent(model, cfg), case.world(cfg), cfg, seed + k, encoder, on_step=rec)
               for k, case in enumerate(cases)]
    p = cfg.perception
    return Dataset.from_samples(rec.samples, p.n_features, 2 * p.n_targets, p.history), results


def onpolicy_disagreement(model: Model, cases, cfg: Config, seed: int,
                          encoder: FeatureEncoder | None = None) -> float:
    """Fraction of stored states where the IL brake differs from the autopilot's, on the IL's own rollouts."""
    data, _ = collect_dagger(model, cases, cfg, seed, encoder)
    return 1.0 - brake_agreement(model, data, cfg.il.brake_threshold)
