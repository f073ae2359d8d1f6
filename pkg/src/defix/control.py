"""Waypoint interpolation and the longitudinal/lateral PID controllers.

Every agent (autopilot, imitation, DQN) builds its controller with ``make_controller``
from the same ``ControlConfig``, so gains are shared by construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .config import ControlConfig
from .geometry import wrap_angle

log = logging.getLogger(__name__)


class OffRouteError(RuntimeError):
    """Ego is too far from the route for target fitting."""


def _segments_for(length: float, spacing: float) -> int:
    lo = max(1, math.floor(length / spacing))
    candidates = [n for n in (lo, lo + 1) if n >= 1]
    return min(candidates, key=lambda n: (abs(length / n - spacing), n))


def interpolate_route(sparse, spacing: float = 4.0) -> np.ndarray:
    """Subdivide every sparse segment into equal pieces as close to ``spacing`` as possible.

    Sparse waypoints are kept as dense nodes. Segments whose length admits no equal split
    within 0.5 m of the spacing (e.g. 9-10.5 m) get the closest feasible split.
    """
    pts = np.asarray(sparse, dtype=float)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("need at least 2 waypoints")
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        length = float(np.linalg.norm(b - a))
        if length == 0.0:
            continue
        n = _segments_for(length, spacing)
        for k in range(1, n + 1):
            out.append(a + (b - a) * (k / n))
    return np.array(out)


def target_velocity(window, dt: float) -> float:
    """Mean per-segment speed implied by covering each consecutive waypoint gap in ``dt`` seconds."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    w = np.asarray(window, dtype=float)
    if len(w) < 2:
        raise ValueError("need at least 2 waypoints")
    gaps = np.linalg.norm(np.diff(w, axis=0), axis=1)
    return float(np.mean(gaps / dt))


def target_steering(target) -> float:
    tx, ty = float(target[0]), float(target[1])
    if tx == 0.0 and ty == 0.0:
        log.warning("degenerate steering target at the ego origin")
        return 0.0
    return math.atan2(ty, tx)


@dataclass(frozen=True)
class PidState:
    kp: float
    ki: float
    kd: float
    integral: float = 0.0
    prev_error: float | None = None
    output_limits: tuple[float, float] = (-math.inf, math.inf)
    windup: float = 10.0


def pid_step(state: PidState, error: float, dt: float) -> tuple[PidState, float]:
    if dt <= 0:
        raise ValueError("dt must be > 0")
    integral = min(max(state.integral + error * dt, -state.windup), state.windup)
    deriv = 0.0 if state.prev_error is None else (error - state.prev_error) / dt
    out = state.kp * error + state.ki * integral + state.kd * deriv
    lo, hi = state.output_limits
    out = min(max(out, lo), hi)
    return replace(state, integral=integral, prev_error=error), out


@dataclass(frozen=True)
class TargetFrame:
    T: tuple[float, float]
    v_star: float
    alpha_star: float
    index: int


def _to_local(x: float, y: float, heading: float, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    d = pts - np.array([x, y])
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def _arc_nodes(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray, n: int = 9) -> np.ndarray:
    """Nodes on the circle through three points, from p0 via p1 to p2; straight segments if collinear."""
    a, b = p1 - p0, p2 - p0
    cross = a[0] * b[1] - a[1] * b[0]
    if abs(cross) < 1e-6 * max(1.0, np.dot(a, a), np.dot(b, b)):
        t = np.linspace(0.0, 1.0, 2 * n - 1)[:, None]
        return np.concatenate([p0 + (p1 - p0) * t[:n], p1 + (p2 - p1) * t[1:n]])
    d = 2.0 * cross
    aa, bb = np.dot(a, a), np.dot(b, b)
    center = p0 + np.array([b[1] * aa - a[1] * bb, a[0] * bb - b[0] * aa]) / d
    r = float(np.linalg.norm(p0 - center))
    ang = [math.atan2(*(p - center)[::-1]) for p in (p0, p1, p2)]
    sweep = wrap_angle(ang[1] - ang[0]) + wrap_angle(ang[2] - ang[1])
    th = ang[0] + np.linspace(0.0, sweep, 2 * n - 1)
    return center + r * np.stack([np.cos(th), np.sin(th)], axis=1)


def nearest_unpassed(dense: np.ndarray, x: float, y: float, start: int = 0, search: int = 20) -> int:
    hi = min(len(dense), start + search + 1)
    p = np.array([x, y])
    d = np.linalg.norm(dense[start:hi] - p, axis=1)
    i = start + int(np.argmin(d))
    if i + 1 < len(dense) and np.dot(dense[i + 1] - dense[i], p - dense[i]) > 0:
        i += 1
    return i


def fit_arc_target(dense: np.ndarray, ego, lookahead: float, start: int = 0,
                   cfg: ControlConfig | None = None, max_offroute: float = 20.0) -> TargetFrame:
    """Target frame for the controllers: local arc node, v* and alpha*."""
    cfg = cfg or ControlConfig()
    dense = np.asarray(dense)
    i = nearest_unpassed(dense, ego.x, ego.y, start)
    if np.linalg.norm(dense[max(i - 1, 0)] - np.array([ego.x, ego.y])) > max_offroute and \
            np.linalg.norm(dense[i] - np.array([ego.x, ego.y])) > max_offroute:
        raise OffRouteError(f"ego {ego.x:.1f},{ego.y:.1f} is more than {max_offroute} m from the route")
    last = len(dense) - 1
    window = dense[i:min(i + cfg.window_segments, last) + 1]
    v_star = target_velocity(window, cfg.spacing / cfg.v_ref) if len(window) >= 2 else 0.0
    j = min(i + max(1, int(math.ceil(lookahead / cfg.spacing))), last)
    if j >= last:
        # past the final node: aim straight through the route end
        end = dense[last]
        direction = dense[last] - dense[last - 1]
        direction = direction / max(np.linalg.norm(direction), 1e-9)
        nodes = end + np.outer(np.linspace(0.0, lookahead, 9), direction)
    else:
        nodes = _arc_nodes(dense[j - 1], dense[j], dense[j + 1])
    local = _to_local(ego.x, ego.y, ego.heading, nodes)
    dist = np.linalg.norm(local, axis=1)
    ahead = local[:, 0] > 0.0
    score = np.abs(dist - lookahead) + np.where(ahead, 0.0, 1e6)
    T = local[int(np.argmin(score))]
    return TargetFrame((float(T[0]), float(T[1])), max(v_star, 0.0), target_steering(T), i)


class VehicleController:
    """Longitudinal + lateral PID pair driving toward a dense waypoint list."""

    def __init__(self, cfg: ControlConfig | None = None, dt: float = 0.05, max_steer: float = 0.7):
        self.cfg = cfg or ControlConfig()
        self.dt = dt
        self.max_steer = max_steer
        self.reset()

    def reset(self) -> None:
        kp, ki, kd = self.cfg.lon_gains
        self.lon = PidState(kp, ki, kd, output_limits=(-1.0, 1.0), windup=self.cfg.windup)
        kp, ki, kd = self.cfg.lat_gains
        self.lat = PidState(kp, ki, kd, output_limits=(-self.max_steer, self.max_steer), windup=self.cfg.windup)
        self.last_target: TargetFrame | None = None

    def act(self, ego, dense: np.ndarray, start: int, brake: bool):
        from .sim import Control

        frame = fit_arc_target(dense, ego, self.cfg.lookahead, start, self.cfg)
        self.last_target = frame
        self.lat, steer = pid_step(self.lat, frame.alpha_star, self.dt)
        if brake:
            return Control(True, steer, 0.0)
        self.lon, out = pid_step(self.lon, frame.v_star - ego.speed, self.dt)
        return Control(False, steer, min(max(out, 0.0), 1.0))


def make_controller(cfg: ControlConfig | None = None, dt: float = 0.05, max_steer: float = 0.7) -> VehicleController:
    return VehicleController(cfg, dt, max_steer)
