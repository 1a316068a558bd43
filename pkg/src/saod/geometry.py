"""Oriented rectangles: corners, rotated IoU, rotated NMS, containment.

Boxes live in grid-cell coordinates. ``theta`` follows the long-edge-90
convention: after construction ``w >= h`` and ``theta`` lies in
``[-pi/2, pi/2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

HALF_PI = 0.5 * math.pi
AREA_EPS = 1e-12
_NMS_EXACT_BAND = 1e-7


def normalize_angle(theta: float) -> float:
    """Wrap an angle into ``[-pi/2, pi/2)``."""
    t = math.fmod(theta + HALF_PI, math.pi)
    if t < 0.0:
        t += math.pi
    t -= HALF_PI
    # fmod can land exactly on +pi/2 through rounding
    if t >= HALF_PI:
        t -= math.pi
    return t


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle ``(cx, cy, w, h, theta)``.

    Construction normalizes to the long-edge-90 convention, so
    ``OrientedBox(0, 0, 1, 3, 0)`` becomes ``w=3, h=1, theta=-pi/2``.
    """

    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box parameters: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")
        w, h, theta = float(self.w), float(self.h), float(self.theta)
        if w < h:
            w, h, theta = h, w, theta + HALF_PI
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "theta", normalize_angle(theta))

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def radius(self) -> float:
        """Half diagonal; radius of the circumscribed circle."""
        return 0.5 * math.hypot(self.w, self.h)

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h, self.theta)

    def translated(self, dx: float, dy: float) -> "OrientedBox":
        return OrientedBox(self.cx + dx, self.cy + dy, self.w, self.h, self.theta)

    def rotated_about(self, px: float, py: float, angle: float) -> "OrientedBox":
        """Rotate the whole box by ``angle`` about the point ``(px, py)``."""
        c, s = math.cos(angle), math.sin(angle)
        x, y = self.cx - px, self.cy - py
        return OrientedBox(px + c * x - s * y, py + s * x + c * y, self.w, self.h, self.theta + angle)

    def hflip(self, width: float) -> "OrientedBox":
        """Mirror across the vertical line ``x = width / 2``."""
        return OrientedBox(width - self.cx, self.cy, self.w, self.h, -self.theta)


def corners(box: OrientedBox) -> np.ndarray:
    """Return the four vertices of ``box`` as a (4, 2) array in CCW order."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    hw, hh = 0.5 * box.w, 0.5 * box.h
    local = ((hw, -hh), (hw, hh), (-hw, hh), (-hw, -hh))
    return np.array([(box.cx + c * u - s * v, box.cy + s * u + c * v) for u, v in local])


def polygon_area(poly: Sequence[Sequence[float]]) -> float:
    """Signed shoelace area; positive for CCW vertex order."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def clip_polygon(subject: list[tuple[float, float]], clip: np.ndarray) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clipping of ``subject`` against the convex CCW polygon ``clip``."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = output
        output = []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0.0:
                if s_prev < 0.0:
                    output.append(_crossing(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0.0:
                output.append(_crossing(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return output


def _crossing(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    dx, dy = a.cx - b.cx, a.cy - b.cy
    rr = a.radius + b.radius
    if dx * dx + dy * dy >= rr * rr:
        return 0.0
    subject = [tuple(p) for p in corners(a)]
    poly = clip_polygon(subject, corners(b))
    area = polygon_area(poly)
    return area if area > AREA_EPS else 0.0


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection over union of two oriented boxes, in ``[0, 1]``."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def iou_matrix(boxes_a: Sequence[OrientedBox], boxes_b: Sequence[OrientedBox]) -> np.ndarray:
    """Pairwise rotated IoU; far-apart pairs are skipped by a circle test."""
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if not len(boxes_a) or not len(boxes_b):
        return out
    ca = np.array([(b.cx, b.cy, b.radius) for b in boxes_a])
    cb = np.array([(b.cx, b.cy, b.radius) for b in boxes_b])
    d2 = (ca[:, None, 0] - cb[None, :, 0]) ** 2 + (ca[:, None, 1] - cb[None, :, 1]) ** 2
    near = d2 < (ca[:, None, 2] + cb[None, :, 2]) ** 2
    for i, j in zip(*np.nonzero(near)):
        out[i, j] = rotated_iou(boxes_a[i], boxes_b[j])
    return out


def _params(boxes: Sequence[OrientedBox]) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=float).reshape(-1, 5)


def _corners_many(p: np.ndarray) -> np.ndarray:
    c, s = np.cos(p[:, 4]), np.sin(p[:, 4])
    hw, hh = 0.5 * p[:, 2], 0.5 * p[:, 3]
    u = np.stack([hw, hw, -hw, -hw], axis=1)
    v = np.stack([-hh, hh, hh, -hh], axis=1)
    x = p[:, None, 0] + c[:, None] * u - s[:, None] * v
    y = p[:, None, 1] + s[:, None] * u + c[:, None] * v
    return np.stack([x, y], axis=-1)


def _inside_many(pts: np.ndarray, p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    c, s = np.cos(p[:, 4])[:, None], np.sin(p[:, 4])[:, None]
    x = pts[..., 0] - p[:, None, 0]
    y = pts[..., 1] - p[:, None, 1]
    u = c * x + s * y
    v = -s * x + c * y
    return (np.abs(u) <= 0.5 * p[:, None, 2] + tol) & (np.abs(v) <= 0.5 * p[:, None, 3] + tol)


def batch_iou(box: OrientedBox, others: Sequence[OrientedBox] | np.ndarray) -> np.ndarray:
    """IoU of ``box`` with each of ``others``, vectorized.

    Builds the intersection polygon from contained corners and edge
    crossings, then orders it by angle around its centroid. Agrees with
    :func:`rotated_iou` to rounding error, not bit for bit.
    """
    q = others if isinstance(others, np.ndarray) else _params(others)
    p = np.broadcast_to(np.array(box.as_tuple(), dtype=float), (len(q), 5))
    return pair_iou(p, q)


def pair_iou(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two (N, 5) arrays of ``(cx, cy, w, h, theta)``."""
    n = len(q)
    if n == 0:
        return np.zeros(0)
    ca, cb = _corners_many(p), _corners_many(q)
    # edge-edge crossings, 16 per pair
    a0, a1 = ca, np.roll(ca, -1, axis=1)
    b0, b1 = cb, np.roll(cb, -1, axis=1)
    r = (a1 - a0)[:, :, None, :]
    d = (b1 - b0)[:, None, :, :]
    qp = b0[:, None, :, :] - a0[:, :, None, :]
    denom = r[..., 0] * d[..., 1] - r[..., 1] * d[..., 0]
    safe = np.where(denom == 0.0, 1.0, denom)
    t = (qp[..., 0] * d[..., 1] - qp[..., 1] * d[..., 0]) / safe
    u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / safe
    hit = (denom != 0.0) & (t >= 0.0) & (t <= 1.0) & (u >= 0.0) & (u <= 1.0)
    cross_pts = (a0[:, :, None, :] + t[..., None] * r).reshape(n, 16, 2)
    pts = np.concatenate([ca, cb, cross_pts], axis=1)
    valid = np.concatenate([_inside_many(ca, q), _inside_many(cb, p), hit.reshape(n, 16)], axis=1)

    cnt = valid.sum(axis=1)
    centroid = (pts * valid[..., None]).sum(axis=1) / np.maximum(cnt, 1)[:, None]
    ang = np.arctan2(pts[..., 1] - centroid[:, None, 1], pts[..., 0] - centroid[:, None, 0])
    ang = np.where(valid, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    rows = np.arange(n)[:, None]
    sx, sy = pts[rows, order, 0], pts[rows, order, 1]
    slot = np.arange(24)[None, :]
    nxt = np.where(slot + 1 >= cnt[:, None], 0, slot + 1)
    term = sx * sy[rows, nxt] - sx[rows, nxt] * sy
    term = np.where(slot < cnt[:, None], term, 0.0)
    inter = np.where(cnt >= 3, 0.5 * np.abs(term.sum(axis=1)), 0.0)
    inter = np.where(inter > AREA_EPS, inter, 0.0)
    union = p[:, 2] * p[:, 3] + q[:, 2] * q[:, 3] - inter
    return np.clip(inter / union, 0.0, 1.0)


def rotated_nms(boxes: Sequence[OrientedBox], scores: Sequence[float], iou_thr: float) -> list[int]:
    """Greedy non-maximum suppression in descending score order.

    Equal scores are broken by lower original index first. A box is dropped
    when its IoU with an already kept box exceeds ``iou_thr``.

    Returns:
        Kept indices, in the order they were accepted.
    """
    if len(boxes) != len(scores):
        raise ValueError(f"got {len(boxes)} boxes but {len(scores)} scores")
    return nms_params(_params(boxes), scores, iou_thr)


def nms_params(params: np.ndarray, scores: Sequence[float], iou_thr: float) -> list[int]:
    """:func:`rotated_nms` over an (N, 5) array of ``(cx, cy, w, h, theta)`` rows."""
    params = np.asarray(params, dtype=float).reshape(-1, 5)
    scores = np.asarray(scores, dtype=float)
    if len(params) != len(scores):
        raise ValueError(f"got {len(params)} boxes but {len(scores)} scores")
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError(f"iou_thr must be in (0, 1], got {iou_thr}")
    n = len(params)
    if n == 0:
        return []
    order = np.lexsort((np.arange(n), -scores))
    radius = 0.5 * np.hypot(params[:, 2], params[:, 3])
    keep: list[int] = []
    suppressed = np.zeros(n, dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        d2 = ((params[rest, :2] - params[i, :2]) ** 2).sum(axis=1)
        near = rest[d2 < (radius[rest] + radius[i]) ** 2]
        if not len(near):
            continue
        ious = pair_iou(np.broadcast_to(params[i], (len(near), 5)), params[near])
        suppressed[near[ious > iou_thr + _NMS_EXACT_BAND]] = True
        # settle near-threshold pairs with the exact clipper
        for j in near[np.abs(ious - iou_thr) <= _NMS_EXACT_BAND]:
            if rotated_iou(OrientedBox(*params[i]), OrientedBox(*params[j])) > iou_thr:
                suppressed[j] = True
    return keep


def point_in_box(p: Sequence[float], box: OrientedBox) -> bool:
    """True iff ``p`` lies inside or on the boundary of ``box``."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    x, y = p[0] - box.cx, p[1] - box.cy
    u = c * x + s * y
    v = -s * x + c * y
    return abs(u) <= 0.5 * box.w and abs(v) <= 0.5 * box.h


def points_in_box(points: np.ndarray, box: OrientedBox) -> np.ndarray:
    """Vectorized :func:`point_in_box` over an (..., 2) array."""
    points = np.asarray(points, dtype=float)
    c, s = math.cos(box.theta), math.sin(box.theta)
    x = points[..., 0] - box.cx
    y = points[..., 1] - box.cy
    u = c * x + s * y
    v = -s * x + c * y
    return (np.abs(u) <= 0.5 * box.w) & (np.abs(v) <= 0.5 * box.h)
