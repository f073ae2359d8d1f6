"""Sensor-level observations.

A frozen random projection of an ego-centric semantic raster stands in for the
pre-trained image backbone: it is generated once from a seed and never trained.
"""

from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .config import PerceptionConfig, SimConfig
from .control import OffRouteError

CHANNELS = ("drivable", "vehicle", "pedestrian", "obstacle", "light")
# rough active-cell counts per channel so each contributes on a comparable scale
_CHANNEL_MASS = (400.0, 6.0, 4.0, 4.0, 6.0)
TARGET_SCALE = 0.1
SPEED_SCALE = 0.1


def to_local_frame(ego, point) -> np.ndarray:
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    dx, dy = point[0] - ego.x, point[1] - ego.y
    return np.array([c * dx + s * dy, -s * dx + c * dy])


def from_local_frame(ego, local) -> np.ndarray:
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    return np.array([ego.x + c * local[0] - s * local[1], ego.y + s * local[0] + c * local[1]])


def _points_to_local(ego, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    d = pts - np.array([ego.x, ego.y])
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)


class FeatureEncoder:
    def __init__(self, cfg: PerceptionConfig | None = None, sim_cfg: SimConfig | None = None):
        self.cfg = cfg or PerceptionConfig()
        self.sim_cfg = sim_cfg or SimConfig()
        g, r = self.cfg.grid, self.cfg.view_radius
        self.cell = 2.0 * r / g
        ticks = np.linspace(-r + self.cell / 2, r - self.cell / 2, g)
        gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
        self.points = np.stack([gx.ravel(), gy.ravel()], axis=1)
        self.in_view = (np.hypot(self.points[:, 0], self.points[:, 1]) <= r) & \
            (self.points[:, 0] >= -self.cfg.rear_view)
        rng = np.random.default_rng(self.cfg.frozen_seed)
        n_cells = g * g
        proj = rng.standard_normal((self.cfg.n_features, len(CHANNELS) * n_cells))
        gains = np.repeat([1.0 / math.sqrt(m) for m in _CHANNEL_MASS], n_cells)
        self.projection = proj * gains
        self.projection.setflags(write=False)

    def projection_hash(self) -> str:
        return hashlib.sha256(self.projection.tobytes()).hexdigest()[:16]

    def rasterize(self, world) -> np.ndarray:
        cfg = self.cfg
        ego = world.ego
        n = len(self.points)
        grid = np.zeros((len(CHANNELS), n))
        pts = self.points
        # drivable corridor around the route
        route = world.route
        lo = max(world.route_progress - 12, 0)
        hi = min(world.route_progress + 14, len(route.dense) - 1)
        if hi > lo:
            seg = _points_to_local(ego, route.dense[lo:hi + 1])
            a, b = seg[:-1], seg[1:]
            # only segments that can reach into the view disk
            reach = cfg.view_radius + self.sim_cfg.corridor_half_width
            near = np.minimum(np.hypot(*a.T), np.hypot(*b.T)) <= reach + np.hypot(*(b - a).T)
            a, b = a[near], b[near]
            dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
            l2 = np.maximum(dx * dx + dy * dy, 1e-12)
            px = pts[:, 0:1] - a[:, 0]
            py = pts[:, 1:2] - a[:, 1]
            t = np.clip((px * dx + py * dy) / l2, 0.0, 1.0)
            ex, ey = px - t * dx, py - t * dy
            d2 = (ex * ex + ey * ey).min(axis=1)
            grid[0] = d2 <= self.sim_cfg.corridor_half_width ** 2
        half_cell = self.cell / 2
        channel = {"vehicle": 1, "pedestrian": 2, "static_obstacle": 3}
        for actor in world.actors:
            st = actor.state
            if math.hypot(st.x - ego.x, st.y - ego.y) > cfg.view_radius + 5.0:
                continue
            rel = st.heading - ego.heading
            c, s = math.cos(rel), math.sin(rel)
            center = to_local_frame(ego, (st.x, st.y))
            dx = pts - center
            ax = np.abs(c * dx[:, 0] + s * dx[:, 1])
            ay = np.abs(-s * dx[:, 0] + c * dx[:, 1])
            inside = (ax <= st.half_length + half_cell) & (ay <= st.half_width + half_cell)
            grid[channel[actor.kind]][inside] = 1.0
        for lt in world.lights:
            if lt.state == "green" or math.hypot(lt.x - ego.x, lt.y - ego.y) > cfg.view_radius + 3.0:
                continue
            center = to_local_frame(ego, (lt.x, lt.y))
            near = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1]) <= 2.0
            grid[4][near] = np.maximum(grid[4][near], 1.0 if lt.state == "red" else 0.5)
        grid[:, ~self.in_view] = 0.0
        return grid

    def encode(self, world, noise_rng: np.random.Generator | None = None) -> np.ndarray:
        feats = np.tanh(self.projection @ self.rasterize(world).ravel())
        if noise_rng is not None:
            sigma = self.sim_cfg.weather_noise.get(world.weather_state, 0.0)
            if sigma > 0:
                feats = feats + noise_rng.normal(0.0, sigma, size=feats.shape)
        return feats


def encode_features(world, encoder: FeatureEncoder, noise_rng: np.random.Generator | None = None) -> np.ndarray:
    return encoder.encode(world, noise_rng)


class SpeedHistory:
    """Last H speeds, front-padded with zeros."""

    def __init__(self, length: int = 120):
        self.length = length
        self._buf: deque = deque(maxlen=length)

    def push(self, speed: float) -> None:
        self._buf.append(float(speed))

    def array(self) -> np.ndarray:
        out = np.zeros(self.length)
        if self._buf:
            out[self.length - len(self._buf):] = self._buf
        return out

    def __len__(self) -> int:
        return len(self._buf)


@dataclass(frozen=True, eq=False)
class Observation:
    features: np.ndarray
    local_targets: np.ndarray
    speed_history: np.ndarray
    weather_noise_seedable: bool = True

    def inputs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.features[None, :], self.local_targets.ravel()[None, :] * TARGET_SCALE,
                self.speed_history[None, :] * SPEED_SCALE)

    def to_dict(self) -> dict:
        return {"features": self.features.tolist(), "local_targets": self.local_targets.tolist(),
                "speed_history": self.speed_history.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        return cls(np.asarray(d["features"], dtype=float), np.asarray(d["local_targets"], dtype=float),
                   np.asarray(d["speed_history"], dtype=float))


def stack_inputs(observations) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    feats = np.stack([o.features for o in observations])
    targets = np.stack([o.local_targets.ravel() for o in observations]) * TARGET_SCALE
    speeds = np.stack([o.speed_history for o in observations]) * SPEED_SCALE
    return feats, targets, speeds


def local_targets(world, dense: np.ndarray, k: int = 4) -> np.ndarray:
    last = len(dense) - 1
    idx = [min(world.route_progress + 1 + i, last) for i in range(k)]
    return _points_to_local(world.ego, dense[idx])


def build_observation(world, dense: np.ndarray, history: SpeedHistory, encoder: FeatureEncoder,
                      noise_rng: np.random.Generator | None = None, off_route: float = 20.0) -> Observation:
    """Observation from sensor stand-ins only: raster features, route targets, speed history."""
    if abs(world.route_lateral) > off_route:
        raise OffRouteError(f"ego is {abs(world.route_lateral):.1f} m off route")
    return Observation(encoder.encode(world, noise_rng), local_targets(world, dense, encoder.cfg.n_targets),
                       history.array(), noise_rng is not None)
