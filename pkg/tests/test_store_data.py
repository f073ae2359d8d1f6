import json

import numpy as np
import pytest

from defix.config import Config, ConfigError, dump_config, from_dict, load_config
from defix.data import Dataset, Sample, aggregate, split_holdout
from defix.nn import Model, checkpoint_from_model, mlp_specs
from defix.perception import Observation
from defix.store import ArtifactStore, MissingArtifactError


def tiny_dataset(n=5, seed=0):
    rng = np.random.default_rng(seed)
    samples = [Sample(Observation(rng.normal(size=6), rng.normal(size=(2, 2)), rng.normal(size=3)),
                      int(k % 2), float(k), f"r{k}", 10 * k, "clear/noon", "autopilot") for k in range(n)]
    return Dataset.from_samples(samples, 6, 4, 3)


def test_dataset_round_trip_bytes_exact():
    d = tiny_dataset()
    back = Dataset.from_bytes(d.to_bytes())
    assert back.to_bytes() == d.to_bytes() and back.content_id == d.content_id
    assert list(back.route_ids) == [f"r{k}" for k in range(5)]
    with pytest.raises(ValueError):
        Dataset.from_bytes(d.to_bytes()[:-8])
    with pytest.raises(ValueError):
        Dataset.from_bytes(b"PK\x03\x04")


def test_aggregate_and_holdout():
    a, b = tiny_dataset(3, 0), tiny_dataset(4, 1)
    agg = aggregate(a, b, Dataset.empty(6, 4, 3))
    assert len(agg) == 7 and np.array_equal(agg.features[:3], a.features)
    tr, ho = split_holdout(100, 0.2, np.random.default_rng(0))
    assert len(ho) == 20 and len(set(tr) | set(ho)) == 100


def test_column_length_mismatch_rejected():
    d = tiny_dataset()
    with pytest.raises(ValueError):
        Dataset(d.features, d.targets, d.speeds, d.labels[:-1], d.rewards, d.route_ids, d.time_steps,
                d.weathers, d.policies)


def test_store_round_trip_and_manifest(tmp_path):
    store = ArtifactStore(tmp_path)
    d = tiny_dataset()
    store.put_dataset("D0", d)
    ck = checkpoint_from_model(Model("mlp", mlp_specs([2, 3, 1])))
    store.put_checkpoint("il_0", ck)
    store.put_json("reports", "r", {"b": 1, "a": [1.5]})
    reopened = ArtifactStore(tmp_path)
    assert reopened.load_dataset("D0").content_id == d.content_id
    assert reopened.load_checkpoint("il_0").id == ck.id
    assert reopened.load_json("r") == {"a": [1.5], "b": 1}
    assert reopened.names("il") == ["il_0"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["artifacts"]["D0"]["path"].startswith("datasets/D0-")


def test_store_missing_and_tampered(tmp_path):
    store = ArtifactStore(tmp_path)
    with pytest.raises(MissingArtifactError):
        store.load_dataset("D0")
    store.put_json("reports", "r", {"a": 1})
    store.path("r").write_text("{}")
    with pytest.raises(ValueError, match="hash"):
        store.load_json("r")
    store.path("r").unlink()
    with pytest.raises(MissingArtifactError):
        store.load_json("r")


def test_config_round_trip_and_errors(tmp_path):
    cfg = Config()
    path = tmp_path / "c.yaml"
    dump_config(cfg, path)
    assert load_config(path).hash() == cfg.hash()
    with pytest.raises(ConfigError) as exc:
        from_dict({"sim": {"dt": -1.0}, "nope": 1})
    assert "nope" in str(exc.value)
    with pytest.raises(ConfigError) as exc:
        from_dict({"dqn": {"spawn_offset": [1.0, 20.0]}})
    assert "dqn.spawn_offset" in exc.value.errors
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
