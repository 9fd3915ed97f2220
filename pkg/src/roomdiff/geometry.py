"""Oriented-box geometry: rectangle corners, convex polygon clipping, exact IoU.

Boxes live in 3D as (center, half_extents, theta) with theta the rotation
around the vertical (z) axis. The horizontal footprint is an oriented
rectangle; vertical extent is an interval, so 3D intersection volume equals
footprint intersection area times vertical overlap length.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import DataError


def rect_corners(center_xy, half_xy, theta) -> np.ndarray:
    """Counter-clockwise corners (4, 2) of an oriented rectangle."""
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    hx, hy = half_xy
    local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
    return local @ rot.T + np.asarray(center_xy)


def polygon_area(pts: np.ndarray) -> float:
    """Shoelace area of a simple polygon, positive for CCW order."""
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` by convex CCW polygon `clip`.

    Returns the vertices of the intersection polygon (possibly empty).
    """
    output = [p for p in np.asarray(subject, dtype=float)]
    clip = np.asarray(clip, dtype=float)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = b - a
        inputs = output
        output = []
        prev = inputs[-1]
        prev_in = _inside(prev, a, edge)
        for cur in inputs:
            cur_in = _inside(cur, a, edge)
            if cur_in:
                if not prev_in:
                    output.append(_intersect(prev, cur, a, b))
                output.append(cur)
            elif prev_in:
                output.append(_intersect(prev, cur, a, b))
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def _inside(p, a, edge):
    # left of (or on) the directed edge for a CCW clip polygon
    return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0.0


def _intersect(p, q, a, b):
    d1 = p - q
    d2 = a - b
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if denom == 0.0:
        return q.copy()
    t = ((p[0] - a[0]) * d2[1] - (p[1] - a[1]) * d2[0]) / denom
    return p + t * (q - p)


def interval_overlap(lo1, hi1, lo2, hi2) -> float:
    return max(0.0, min(hi1, hi2) - max(lo1, lo2))


def oriented_box_iou(center_a, size_a, theta_a, center_b, size_b, theta_b) -> float:
    """Exact IoU of two vertically-aligned oriented boxes.

    center: 3-vector, size: half-extents (all > 0), theta: yaw angle.
    Degenerate (zero-volume) boxes yield a warning and IoU 0.
    """
    size_a = np.asarray(size_a, dtype=float)
    size_b = np.asarray(size_b, dtype=float)
    vol_a = float(np.prod(2.0 * size_a))
    vol_b = float(np.prod(2.0 * size_b))
    if vol_a <= 0.0 or vol_b <= 0.0:
        warnings.warn("zero-volume box excluded from IoU", stacklevel=2)
        return 0.0
    ra = rect_corners(center_a[:2], size_a[:2], theta_a)
    rb = rect_corners(center_b[:2], size_b[:2], theta_b)
    inter_poly = clip_polygon(ra, rb)
    area = abs(polygon_area(inter_poly))
    dz = interval_overlap(
        center_a[2] - size_a[2], center_a[2] + size_a[2],
        center_b[2] - size_b[2], center_b[2] + size_b[2],
    )
    inter = area * dz
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def point_in_rect(p_xy, center_xy, half_xy, theta) -> bool:
    """Test a point against an oriented rectangle (boundary counts inside)."""
    c, s = np.cos(theta), np.sin(theta)
    dx = p_xy[0] - center_xy[0]
    dy = p_xy[1] - center_xy[1]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return abs(u) <= half_xy[0] + 1e-12 and abs(v) <= half_xy[1] + 1e-12


def rect_contains_rect(center_o, half_o, theta_o, center_i, half_i, theta_i) -> bool:
    """True when rectangle `i` lies entirely inside rectangle `o` (footprints)."""
    if np.prod(half_i) <= 0 or np.prod(half_o) <= 0:
        return False
    corners = rect_corners(center_i, half_i, theta_i)
    return all(point_in_rect(p, center_o, half_o, theta_o) for p in corners)


def axis_aligned_iou(center_a, size_a, center_b, size_b) -> float:
    """Exact IoU of two axis-aligned boxes given center and half-extents."""
    size_a = np.asarray(size_a, dtype=float)
    size_b = np.asarray(size_b, dtype=float)
    if np.any(size_a <= 0.0) or np.any(size_b <= 0.0):
        raise DataError("axis_aligned_iou: non-positive half-extent")
    center_a = np.asarray(center_a, dtype=float)
    center_b = np.asarray(center_b, dtype=float)
    lo = np.maximum(center_a - size_a, center_b - size_b)
    hi = np.minimum(center_a + size_a, center_b + size_b)
    edges = np.maximum(0.0, hi - lo)
    inter = float(np.prod(edges))
    vol_a = float(np.prod(2.0 * size_a))
    vol_b = float(np.prod(2.0 * size_b))
    return inter / (vol_a + vol_b - inter)
