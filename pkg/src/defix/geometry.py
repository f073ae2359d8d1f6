"""Planar geometry helpers shared by the simulator, controllers and perception."""

from __future__ import annotations

import math

import numpy as np


def wrap_angle(angle: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def box_corners(x: float, y: float, heading: float, half_length: float, half_width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    ax = np.array([c, s]) * half_length
    ay = np.array([-s, c]) * half_width
    center = np.array([x, y])
    return np.array([center + ax + ay, center + ax - ay, center - ax - ay, center - ax + ay])


def boxes_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals given as (4, 2) corner arrays.

    Touching boxes (zero-area contact) do not count as overlapping.
    """
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
        for n in normals:
            pa = a @ n
            pb = b @ n
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def polyline_arclength(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def project_onto_polyline(
    points: np.ndarray, cum_s: np.ndarray, p: np.ndarray, lo: int = 0, hi: int | None = None
) -> tuple[float, float, int]:
    """Project point ``p`` onto segments ``lo..hi`` of a polyline.

    Returns (arclength of the projection, signed lateral offset with left positive,
    segment index).
    """
    n = len(points)
    hi = n - 1 if hi is None else min(hi, n - 1)
    lo = max(0, min(lo, hi - 1))
    a = points[lo:hi]
    b = points[lo + 1:hi + 1]
    d = b - a
    seg_len2 = np.einsum("ij,ij->i", d, d)
    seg_len2 = np.where(seg_len2 > 0, seg_len2, 1e-12)
    t = np.clip(np.einsum("ij,ij->i", p - a, d) / seg_len2, 0.0, 1.0)
    proj = a + t[:, None] * d
    dist2 = np.einsum("ij,ij->i", p - proj, p - proj)
    k = int(np.argmin(dist2))
    seg = d[k]
    rel = p - a[k]
    cross = seg[0] * rel[1] - seg[1] * rel[0]
    lateral = math.copysign(math.sqrt(dist2[k]), cross) if dist2[k] > 0 else 0.0
    s = cum_s[lo + k] + t[k] * math.sqrt(seg_len2[k])
    return float(s), float(lateral), lo + k


def point_at(points: np.ndarray, cum_s: np.ndarray, s: float) -> tuple[np.ndarray, float]:
    """Position and tangent heading at arclength ``s`` (clamped to the polyline)."""
    s = float(np.clip(s, 0.0, cum_s[-1]))
    k = int(np.searchsorted(cum_s, s, side="right") - 1)
    k = min(max(k, 0), len(points) - 2)
    seg = points[k + 1] - points[k]
    length = cum_s[k + 1] - cum_s[k]
    t = 0.0 if length <= 0 else (s - cum_s[k]) / length
    return points[k] + t * seg, math.atan2(seg[1], seg[0])


def segment_normals(points: np.ndarray) -> np.ndarray:
    """Unit left normals at every vertex (averaged tangent of adjacent segments)."""
    d = np.diff(points, axis=0)
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    tangents = np.empty_like(points)
    tangents[0] = d[0]
    tangents[-1] = d[-1]
    if len(points) > 2:
        mid = d[:-1] + d[1:]
        tangents[1:-1] = mid / np.maximum(np.linalg.norm(mid, axis=1, keepdims=True), 1e-12)
    return np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)
