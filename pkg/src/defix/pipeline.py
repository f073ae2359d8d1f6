"""Stage-1 / stage-2 orchestration over the artifact store."""

from __future__ import annotations

import hashlib
import logging
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .autopilot import AutopilotAgent, collect_demonstrations
from .classifier import (DefixAgent, LibraryEntry, PolicyLibrary, collect_classifier_data, collect_composite_data,
                         train_classifier)
from .config import Config
from .data import aggregate
from .evaluation import (aggregate as summarize, evaluate_mini, evaluate_suite, extract_failures,
                         failure_frequencies, reconstruct_mini_scenario, select_failure)
from .il import ILAgent, brake_agreement, collect_dagger, train_brake_classifier
from .perception import FeatureEncoder
from .rl import MiniScenario, MiniScenarioEnv, RLAgent, dqn_train, rl_act
from .rollout import run_episode
from .sim import TraceWriter
from .store import ArtifactStore, MissingArtifactError
from .suites import RouteCase, mixed_suite, training_suite

log = logging.getLogger(__name__)

MODES = ("autopilot", "il_only", "rl_only", "defix")
CLASSIFIER_MIX = {"stuck_vehicle": 8, "crossing_pedestrian": 4, "red_light_runner": 4,
                  "uncontrolled_turn": 4, "none": 4}
HELDOUT_EPISODES = 100


class PreconditionError(RuntimeError):
    """A command was run before the artifacts it depends on exist, or in an illegal order."""


def sub_seed(seed: int, label: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{label}".encode()).digest()[:4], "little")


def _encoder(cfg: Config) -> FeatureEncoder:
    return FeatureEncoder(cfg.perception, cfg.sim)


def _require(store: ArtifactStore, *names: str) -> None:
    for n in names:
        if not store.has(n):
            raise MissingArtifactError(f"artifact {n!r} is missing; run the producing command first")


@contextmanager
def _timed(timings: dict | None, key: str):
    # wall-clock durations go to the caller only, never into artifacts
    t0 = time.perf_counter()
    yield
    if timings is not None:
        timings[key] = time.perf_counter() - t0


def _check_config(store: ArtifactStore, cfg: Config, seed: int) -> None:
    run = store.manifest.get("run")
    if run is None:
        store.manifest["run"] = {"config_hash": cfg.hash(), "seed": seed}
        store._save_manifest()
    elif run != {"config_hash": cfg.hash(), "seed": seed}:
        raise PreconditionError(f"store {store.root} was created with {run}; refusing to mix runs")


def _put_suite(store: ArtifactStore, name: str, cases: list[RouteCase]) -> None:
    store.put_json("scenarios", name, {"cases": [c.to_dict() for c in cases]})


def load_suite(store: ArtifactStore, name: str) -> list[RouteCase]:
    return [RouteCase.from_dict(d) for d in store.load_json(name)["cases"]]


def evaluation_suite(store: ArtifactStore, cfg: Config, seed: int) -> list[RouteCase]:
    if not store.has("suite_mixed"):
        _put_suite(store, "suite_mixed", mixed_suite(cfg, sub_seed(seed, "mixed")))
    return load_suite(store, "suite_mixed")


# --- stage 1 ----------------------------------------------------------------------------------


def cmd_collect(store: ArtifactStore, cfg: Config, seed: int) -> dict:
    _check_config(store, cfg, seed)
    cases = training_suite(cfg, sub_seed(seed, "train"), cfg.il.train_routes)
    _put_suite(store, "suite_train", cases)
    data, episodes = collect_demonstrations(cases, cfg, sub_seed(seed, "collect"), _encoder(cfg))
    store.put_dataset("D0", data, {"source": "autopilot", "episodes": len(episodes)})
    return {"D0": len(data), "brake_fraction": round(float(np.mean(data.labels)), 4)}


def cmd_train_il(store: ArtifactStore, cfg: Config, seed: int) -> dict:
    _check_config(store, cfg, seed)
    _require(store, "D0")
    ckpt, report = train_brake_classifier(store.load_dataset("D0"), cfg, sub_seed(seed, "il_0"))
    store.put_checkpoint("il_0", ckpt, {"dataset": "D0"})
    store.put_checkpoint("il", ckpt, {"alias_of": "il_0"})
    return {"il_0": ckpt.id, "holdout_agreement": report["holdout_agreement"]}


def heldout_states(store: ArtifactStore, cfg: Config, seed: int, encoder: FeatureEncoder):
    """Fixed DAgger evaluation set: expert-labeled states the initial learner visits on held-out routes."""
    if not store.has("H"):
        cases = training_suite(cfg, sub_seed(seed, "heldout"), cfg.il.eval_routes, prefix="heldout")
        _put_suite(store, "suite_heldout", cases)
        data, _ = collect_dagger(store.load_checkpoint("il_0").build(), cases, cfg, sub_seed(seed, "H"), encoder)
        store.put_dataset("H", data, {"source": "il_0 rollouts, autopilot labels"})
    return store.load_dataset("H")


def cmd_dagger(store: ArtifactStore, cfg: Config, seed: int) -> dict:
    _check_config(store, cfg, seed)
    _require(store, "D0", "il_0")
    if store.has("dagger_report"):
        raise PreconditionError("DAgger already ran in this store")
    enc = _encoder(cfg)
    held = heldout_states(store, cfg, seed, enc)
    ckpt = store.load_checkpoint("il_0")
    data = store.load_dataset("D0")
    cases = training_suite(cfg, sub_seed(seed, "dagger"), cfg.il.dagger_routes, prefix="dagger")
    _put_suite(store, "suite_dagger", cases)
    rows = [{"iteration": 0, "n": len(data), "checkpoint": ckpt.id,
             "heldout_disagreement": round(1.0 - brake_agreement(ckpt.build(), held), 6)}]
    for i in range(1, cfg.il.dagger_iterations + 1):
        new, _ = collect_dagger(ckpt.build(), cases, cfg, sub_seed(seed, f"dagger_{i}"), enc)
        data = aggregate(data, new)
        store.put_dataset(f"D{i}", data, {"source": f"D{i - 1} + il_{i - 1} rollouts", "added": len(new)})
        if cfg.il.warm_start:
            ckpt, report = train_brake_classifier(data, cfg, sub_seed(seed, f"il_{i}"), ckpt, cfg.il.dagger_epochs,
                                                  cfg.net.lr * cfg.il.dagger_lr_scale)
        else:
            ckpt, report = train_brake_classifier(data, cfg, sub_seed(seed, f"il_{i}"))
        store.put_checkpoint(f"il_{i}", ckpt, {"dataset": f"D{i}"})
        rows.append({"iteration": i, "n": len(data), "added": len(new), "checkpoint": ckpt.id,
                     "heldout_disagreement": round(1.0 - brake_agreement(ckpt.build(), held), 6)})
    store.put_checkpoint("il", ckpt, {"alias_of": f"il_{cfg.il.dagger_iterations}"})
    report = {"heldout_states": len(held), "iterations": rows}
    store.put_json("reports", "dagger_report", report)
    return report


def cmd_stage1(store: ArtifactStore, cfg: Config, seed: int) -> dict:
    return {"collect": cmd_collect(store, cfg, seed), "train_il": cmd_train_il(store, cfg, seed),
            "dagger": cmd_dagger(store, cfg, seed)}


# --- agents -----------------------------------------------------------------------------------


def load_library(store: ArtifactStore) -> PolicyLibrary:
    if store.has("library"):
        return PolicyLibrary.from_dict(store.load_json("library"))
    _require(store, "il")
    return PolicyLibrary([LibraryEntry("il", "il", "il", store.entry("il")["meta"]["id"])])


def agent_factory(store: ArtifactStore, cfg: Config, mode: str):
    if mode == "autopilot":
        return lambda: AutopilotAgent(cfg)
    _require(store, "il")
    il = store.load_checkpoint("il").build()
    if mode == "il_only":
        return lambda: ILAgent(il, cfg)
    lib = load_library(store)
    if lib.n_classes < 2:
        raise PreconditionError(f"mode {mode!r} needs at least one stage-2 iteration")
    if mode == "rl_only":
        rl = store.load_checkpoint(lib.entries[1].checkpoint).build()
        return lambda: RLAgent(rl, cfg, lib.entries[1].policy_id)
    if mode == "defix":
        specialists = {k: store.load_checkpoint(e.checkpoint).build() for k, e in enumerate(lib.entries) if k > 0}
        names = {k: e.policy_id for k, e in enumerate(lib.entries)}
        clf = store.load_checkpoint(lib.classifier).build()
        return lambda: DefixAgent(il, specialists, clf, cfg, names)
    raise ValueError(f"unknown mode {mode!r}")


# --- evaluation -------------------------------------------------------------------------------


def cmd_evaluate(store: ArtifactStore, cfg: Config, seed: int, mode: str, tag: str | None = None) -> dict:
    _check_config(store, cfg, seed)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    factory = agent_factory(store, cfg, mode)
    cases = evaluation_suite(store, cfg, seed)
    results, records = evaluate_suite(factory, cases, cfg, sub_seed(seed, "eval"), _encoder(cfg))
    summary = summarize(results)
    report = {"mode": mode, "suite": "suite_mixed", "summary": summary.to_dict(),
              "routes": [r.to_dict() for r in results],
              "infractions": [r.to_dict(with_snapshot=False) for r in records]}
    name = f"eval_{mode}" if tag is None else f"eval_{mode}_{tag}"
    store.put_json("reports", name, report)
    store.put_json("reports", f"{name}_snapshots", {r.snapshot_id: r.snapshot for r in records})
    return report


# --- stage 2 ----------------------------------------------------------------------------------


def cmd_stage2_iteration(store: ArtifactStore, cfg: Config, seed: int, timings: dict | None = None) -> dict:
    """One detect-and-fix round: find failures, train a specialist, retrain the classifier."""
    _check_config(store, cfg, seed)
    _require(store, "il")
    enc = _encoder(cfg)
    lib = load_library(store)
    k = lib.n_classes
    mode = "defix" if k > 1 else "il_only"
    cases = evaluation_suite(store, cfg, seed)
    with _timed(timings, "detect"):
        results, records = evaluate_suite(agent_factory(store, cfg, mode), cases, cfg,
                                          sub_seed(seed, f"detect_{k}"), enc)
    spots = extract_failures(records, cfg.eval.dedupe_bin)
    covered = set(lib.kinds())
    fixable = [s for s in spots if s.record.snapshot.get("scenario") is not None
               and s.record.snapshot["scenario"]["kind"] not in covered]
    report = {"iteration": k, "detect_mode": mode, "detect_summary": summarize(results).to_dict(),
              "failure_frequencies": failure_frequencies(spots), "n_spots": len(spots),
              "n_fixable": len(fixable)}
    rng = np.random.default_rng(sub_seed(seed, f"select_{k}"))
    spot = select_failure(fixable, cfg.classifier.selection, rng)
    if spot is None:
        report["converged"] = True
        store.put_json("reports", f"stage2_iter_{k}", report)
        return report
    mini = reconstruct_mini_scenario(spot, cfg)
    store.put_json("scenarios", f"mini_{k}", mini.to_dict(), {"scenario_id": mini.scenario_id})
    with _timed(timings, "dqn_train"):
        ckpt = dqn_train(mini, cfg, sub_seed(seed, f"dqn_{k}"), enc)
    store.put_checkpoint(f"rl_{k}", ckpt, {"scenario": f"mini_{k}"})
    seeds = [sub_seed(seed, f"heldout_{k}_{j}") for j in range(HELDOUT_EPISODES)]
    heldout = evaluate_mini(ckpt.build(), mini, cfg, seeds, enc)
    lib.entries.append(LibraryEntry(f"rl_{k}", "rl", f"rl_{k}", ckpt.id, mini.kind, spot.record.snapshot_id))
    il = store.load_checkpoint("il").build()
    clf_cases = mixed_suite(cfg, sub_seed(seed, f"classifier_{k}"), CLASSIFIER_MIX, prefix=f"cls{k}")
    _put_suite(store, f"suite_classifier_{k}", clf_cases)
    with _timed(timings, "classifier"):
        specialists = {i: store.load_checkpoint(e.checkpoint).build() for i, e in enumerate(lib.entries) if i > 0}
        data = collect_classifier_data(il, lib, clf_cases, cfg, sub_seed(seed, f"cdata_{k}"), enc, specialists)
        clf, clf_report = train_classifier(data, lib.n_classes, cfg, sub_seed(seed, f"clf_{k}"))
        rounds = [clf_report["holdout_accuracy"]]
        for r in range(1, cfg.classifier.composite_rounds + 1):
            extra = collect_composite_data(il, specialists, clf.build(), lib, clf_cases, cfg,
                                           sub_seed(seed, f"cdata_{k}_{r}"), enc)
            data = aggregate(data, extra)
            clf, clf_report = train_classifier(data, lib.n_classes, cfg, sub_seed(seed, f"clf_{k}_{r}"))
            rounds.append(clf_report["holdout_accuracy"])
    store.put_dataset(f"C{k}", data, {"source": "il_only, handover and composite rollouts, reward labels"})
    store.put_checkpoint(f"classifier_{k}", clf, {"dataset": f"C{k}"})
    lib.classifier, lib.classifier_id, lib.version = f"classifier_{k}", clf.id, k
    store.put_json("reports", f"library_v{k}", lib.to_dict())
    store.put_json("scenarios", "library", lib.to_dict())
    report.update({"converged": False, "selected": spot.to_dict(), "mini_scenario": mini.scenario_id,
                   "rl_checkpoint": ckpt.id, "rl_heldout": heldout, "classifier_checkpoint": clf.id,
                   "classifier": {x: clf_report[x] for x in ("n_train", "n_holdout", "class_counts",
                                                          "holdout_accuracy")},
                   "classifier_rounds": rounds})
    store.put_json("reports", f"stage2_iter_{k}", report)
    return report


# --- replay -----------------------------------------------------------------------------------


def cmd_replay(store: ArtifactStore, cfg: Config, seed: int, scenario_id: str, mode: str = "defix") -> Path:
    """Re-run a stored mini-scenario (by id) or suite route (by case id) and write its trace."""
    out = store.root / "reports" / f"replay_{scenario_id}.jsonl"
    for name in store.names("mini_"):
        entry = store.entry(name)
        if entry["meta"].get("scenario_id") == scenario_id or name == scenario_id:
            mini = MiniScenario.from_dict(store.load_json(name))
            rl_name = "rl_" + name.split("_", 1)[1]
            model = store.load_checkpoint(rl_name).build() if store.has(rl_name) else None
            env = MiniScenarioEnv(mini, cfg)
            obs = env.reset(np.random.default_rng(seed))
            with TraceWriter(out) as tw:
                tw.write(env.world, policy=rl_name)
                done = False
                while not done:
                    obs, _, done, _ = env.step(int(rl_act(model, obs)) if model is not None else 1)
                    tw.write(env.world, policy=rl_name)
            return out
    for name in store.names("suite_"):
        for case in load_suite(store, name):
            if case.case_id == scenario_id:
                agent = agent_factory(store, cfg, mode)()
                with TraceWriter(out) as tw:
                    run_episode(agent, case.world(cfg), cfg, seed, _encoder(cfg), trace=tw)
                return out
    raise MissingArtifactError(f"no stored scenario or route with id {scenario_id!r}")
