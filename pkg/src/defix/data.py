"""Sample/Dataset containers shared by imitation learning and the policy classifier."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .perception import SPEED_SCALE, TARGET_SCALE, Observation

_ARRAYS = ("features", "targets", "speeds", "labels", "rewards", "route_ids", "time_steps", "weathers", "policies")
DATA_MAGIC = b"DEFIX-DATA 1\n"


@dataclass(frozen=True, eq=False)
class Sample:
    observation: Observation
    label: int
    reward_value: float
    route_id: str
    time_step: int
    weather: str
    policy: str


class Dataset:
    """Column-oriented sample store."""

    def __init__(self, features, targets, speeds, labels, rewards, route_ids, time_steps, weathers, policies):
        self.features = np.asarray(features, dtype=float)
        self.targets = np.asarray(targets, dtype=float)
        self.speeds = np.asarray(speeds, dtype=float)
        self.labels = np.asarray(labels, dtype=int)
        self.rewards = np.asarray(rewards, dtype=float)
        self.route_ids = np.asarray(route_ids, dtype=str)
        self.time_steps = np.asarray(time_steps, dtype=int)
        self.weathers = np.asarray(weathers, dtype=str)
        self.policies = np.asarray(policies, dtype=str)
        n = len(self.labels)
        for name in _ARRAYS:
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")

    @classmethod
    def empty(cls, n_features: int = 128, n_targets: int = 8, history: int = 120) -> "Dataset":
        return cls(np.zeros((0, n_features)), np.zeros((0, n_targets)), np.zeros((0, history)),
                   [], [], [], [], [], [])

    @classmethod
    def from_samples(cls, samples: list[Sample], n_features: int = 128, n_targets: int = 8,
                     history: int = 120) -> "Dataset":
        if not samples:
            return cls.empty(n_features, n_targets, history)
        return cls(np.stack([s.observation.features for s in samples]),
                   np.stack([s.observation.local_targets.ravel() for s in samples]),
                   np.stack([s.observation.speed_history for s in samples]),
                   [s.label for s in samples], [s.reward_value for s in samples],
                   [s.route_id for s in samples], [s.time_step for s in samples],
                   [s.weather for s in samples], [s.policy for s in samples])

    def __len__(self) -> int:
        return len(self.labels)

    def inputs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.features, self.targets * TARGET_SCALE, self.speeds * SPEED_SCALE

    def subset(self, idx) -> "Dataset":
        return Dataset(*(getattr(self, name)[idx] for name in _ARRAYS))

    def concat(self, other: "Dataset") -> "Dataset":
        if len(self) == 0:
            return other
        if len(other) == 0:
            return self
        return Dataset(*(np.concatenate([getattr(self, n), getattr(other, n)]) for n in _ARRAYS))

    def with_labels(self, labels) -> "Dataset":
        cols = [getattr(self, n) for n in _ARRAYS]
        cols[3] = np.asarray(labels, dtype=int)
        return Dataset(*cols)

    def to_bytes(self) -> bytes:
        """``DEFIX-DATA 1`` line, one JSON header line, then the raw little-endian columns."""
        cols, blobs = [], []
        for n in _ARRAYS:
            arr = np.ascontiguousarray(getattr(self, n))
            arr = arr.astype(arr.dtype.newbyteorder("<"))
            cols.append({"name": n, "dtype": arr.dtype.str, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
        head = json.dumps({"columns": cols}, sort_keys=True).encode() + b"\n"
        return DATA_MAGIC + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Dataset":
        if not blob.startswith(DATA_MAGIC):
            raise ValueError("not a dataset file")
        rest = blob[len(DATA_MAGIC):]
        nl = rest.index(b"\n")
        head = json.loads(rest[:nl])
        pos = nl + 1
        cols = {}
        for c in head["columns"]:
            dt = np.dtype(c["dtype"])
            count = int(np.prod(c["shape"])) if c["shape"] else 1
            size = count * dt.itemsize
            if pos + size > len(rest):
                raise ValueError("truncated dataset file")
            cols[c["name"]] = np.frombuffer(rest[pos:pos + size], dtype=dt).reshape(c["shape"])
            pos += size
        return cls(*(cols[n] for n in _ARRAYS))

    @property
    def content_id(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())


def aggregate(*datasets: Dataset) -> Dataset:
    """DAgger aggregation: union of all samples, order preserved."""
    out = datasets[0]
    for d in datasets[1:]:
        out = out.concat(d)
    return out


def split_holdout(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    k = int(round(n * fraction))
    return np.sort(order[k:]), np.sort(order[:k])
