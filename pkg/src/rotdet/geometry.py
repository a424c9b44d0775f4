"""Rotated-rectangle geometry: conversions, IoU via polygon clipping, NMS.

Boxes come in two flavours. ``HorizontalBox`` is an axis-aligned rectangle in
center form ``(cx, cy, w, h)``. ``OrientedBox`` adds a rotation angle and is
kept in long-edge canonical form: ``w >= h > 0`` and ``theta`` in
``[-pi/2, pi/2)`` radians, measured counter-clockwise from the +x axis to the
long edge.

Array-based kernels operate on ``(N, 4)`` / ``(N, 5)`` float arrays with the
same field order and are the hot path for NMS, assignment and evaluation; the
scalar functions are the reference semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

HALF_PI = math.pi / 2.0

# Polygon areas below this (px^2) are treated as empty intersections; avoids
# sign-flip noise in the shoelace sum for sliver overlaps.
DEGENERATE_AREA = 1e-12


@dataclass(frozen=True)
class HorizontalBox:
    """Axis-aligned rectangle in center form, sizes in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle ``(cx, cy, w, h, theta)``.

    ``w`` is the long edge once canonicalized; construction only requires
    positive sizes so that intermediate (pre-canonical) values can exist.
    """

    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h, self.theta], dtype=np.float64)


@dataclass(frozen=True)
class Polygon4:
    """Convex quadrilateral, vertices counter-clockwise (positive signed area)."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if len(self.vertices) != 4:
            raise ValueError(f"expected 4 vertices, got {len(self.vertices)}")

    @classmethod
    def from_array(cls, pts: np.ndarray) -> "Polygon4":
        pts = np.asarray(pts, dtype=np.float64).reshape(4, 2)
        return cls(tuple((float(x), float(y)) for x, y in pts))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=np.float64)

    @property
    def signed_area(self) -> float:
        return shoelace_area(self.as_array())


def rotation_matrix(alpha: float) -> np.ndarray:
    """2x2 counter-clockwise rotation matrix for angle ``alpha`` (radians)."""
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def wrap_angle(theta: float) -> float:
    """Wrap an angle into ``[-pi/2, pi/2)``."""
    return (theta + HALF_PI) % math.pi - HALF_PI


def canonicalize(b: OrientedBox) -> OrientedBox:
    """Return ``b`` in long-edge form: ``w >= h``, ``theta`` in ``[-pi/2, pi/2)``.

    Idempotent; swapping edges rotates the angle by pi/2, which describes the
    same point set.
    """
    w, h, theta = b.w, b.h, b.theta
    if w < h:
        w, h = h, w
        theta = theta + HALF_PI
    return OrientedBox(b.cx, b.cy, w, h, wrap_angle(theta))


def canonicalize_array(obbs: np.ndarray) -> np.ndarray:
    """Vectorized :func:`canonicalize` over an ``(N, 5)`` array."""
    obbs = np.asarray(obbs, dtype=np.float64).copy()
    swap = obbs[:, 2] < obbs[:, 3]
    obbs[swap, 2], obbs[swap, 3] = obbs[swap, 3].copy(), obbs[swap, 2].copy()
    obbs[swap, 4] += HALF_PI
    obbs[:, 4] = (obbs[:, 4] + HALF_PI) % math.pi - HALF_PI
    return obbs


def obb_to_polygon(b: OrientedBox) -> Polygon4:
    """Four corners of ``b`` in CCW order, centroid at ``(cx, cy)``."""
    return Polygon4.from_array(obb_corners(b.as_array()[None])[0])


def obb_corners(obbs: np.ndarray) -> np.ndarray:
    """Corners of ``(N, 5)`` boxes as an ``(N, 4, 2)`` array, CCW per box."""
    obbs = np.asarray(obbs, dtype=np.float64)
    c, s = np.cos(obbs[:, 4]), np.sin(obbs[:, 4])
    hw, hh = obbs[:, 2] / 2.0, obbs[:, 3] / 2.0
    # Local CCW corners (+,+), (-,+), (-,-), (+,-) rotated into the plane.
    lx = np.stack([hw, -hw, -hw, hw], axis=1)
    ly = np.stack([hh, hh, -hh, -hh], axis=1)
    x = obbs[:, :1] + lx * c[:, None] - ly * s[:, None]
    y = obbs[:, 1:2] + lx * s[:, None] + ly * c[:, None]
    return np.stack([x, y], axis=2)


def polygon_to_obb(poly: Polygon4) -> OrientedBox:
    """Recover the oriented box whose corners are ``poly`` (an exact rectangle).

    For general quadrilaterals use :func:`min_area_rect` instead.
    """
    pts = poly.as_array()
    e1 = pts[1] - pts[0]
    e2 = pts[2] - pts[1]
    w = float(np.hypot(*e1))
    h = float(np.hypot(*e2))
    if w <= 0 or h <= 0:
        raise ValueError("degenerate polygon: zero-length edge")
    cx, cy = pts.mean(axis=0)
    # First edge runs corner (+,+) -> (-,+), i.e. along -x of the box frame.
    theta = math.atan2(-e1[1], -e1[0])
    return canonicalize(OrientedBox(float(cx), float(cy), w, h, theta))


def shoelace_area(pts: np.ndarray) -> float:
    """Signed polygon area (positive for CCW winding)."""
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _clip_polygon(subject: list[tuple[float, float]], clip: np.ndarray) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of ``subject`` against CCW convex ``clip``."""
    output = subject
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        verts = output
        output = []
        px, py = verts[-1]
        prev_cross = ex * (py - ay) - ey * (px - ax)
        for vx, vy in verts:
            cross = ex * (vy - ay) - ey * (vx - ax)
            if cross >= 0.0:
                if prev_cross < 0.0:
                    t = prev_cross / (prev_cross - cross)
                    output.append((px + t * (vx - px), py + t * (vy - py)))
                output.append((vx, vy))
            elif prev_cross >= 0.0:
                t = prev_cross / (prev_cross - cross)
                output.append((px + t * (vx - px), py + t * (vy - py)))
            px, py, prev_cross = vx, vy, cross
    return output


def _same_point_set(a: OrientedBox, b: OrientedBox) -> bool:
    ca, cb = canonicalize(a), canonicalize(b)
    if not (ca.cx == cb.cx and ca.cy == cb.cy and ca.w == cb.w and ca.h == cb.h):
        return False
    if ca.theta == cb.theta:
        return True
    # A square is invariant under quarter turns.
    return ca.w == ca.h and abs(abs(ca.theta - cb.theta) - HALF_PI) == 0.0


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection over union of two rotated rectangles, in ``[0, 1]``.

    Computed by Sutherland-Hodgman clipping of one rectangle against the
    other plus the shoelace area. The operand order is normalized so the
    result is exactly symmetric; coincident boxes return exactly 1.0 and
    disjoint interiors return exactly 0.0.
    """
    if _same_point_set(a, b):
        return 1.0
    ka = (a.cx, a.cy, a.w, a.h, a.theta)
    kb = (b.cx, b.cy, b.w, b.h, b.theta)
    if kb < ka:
        a, b = b, a
    subject = [tuple(p) for p in obb_corners(a.as_array()[None])[0]]
    clip = obb_corners(b.as_array()[None])[0]
    clipped = _clip_polygon(subject, clip)
    if len(clipped) < 3:
        return 0.0
    inter = shoelace_area(np.asarray(clipped))
    if inter < DEGENERATE_AREA:
        return 0.0
    union = a.area + b.area - inter
    return float(inter / union)


_MAXV = 8  # a rect/rect intersection has at most 8 vertices


def _clip_many(verts: np.ndarray, counts: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Clip ``(N, V, 2)`` polygons (per-row ``counts``) against edge a->b.

    The edge may be shared ((2,) points) or per row ((N, 2) points).
    """
    n, v, _ = verts.shape
    if a.ndim == 1:
        ax, ay = a[0], a[1]
        ex, ey = b[0] - a[0], b[1] - a[1]
    else:
        ax, ay = a[:, 0, None], a[:, 1, None]
        ex, ey = (b - a)[:, 0, None], (b - a)[:, 1, None]
    cross = ex * (verts[..., 1] - ay) - ey * (verts[..., 0] - ax)
    idx = np.arange(v)
    safe = np.maximum(counts, 1)[:, None]
    prev_idx = (idx[None, :] - 1) % safe
    prev = np.take_along_axis(verts, prev_idx[..., None], axis=1)
    prev_cross = np.take_along_axis(cross, prev_idx, axis=1)

    valid_slot = idx[None, :] < counts[:, None]
    inside = cross >= 0.0
    prev_inside = prev_cross >= 0.0
    crossing = valid_slot & (inside != prev_inside)
    keep = valid_slot & inside

    denom = prev_cross - cross
    denom = np.where(denom == 0.0, 1.0, denom)
    t = (prev_cross / denom)[..., None]
    inter_pt = prev + t * (verts - prev)

    # Two output slots per input vertex: the crossing point then the vertex.
    out = np.empty((n, 2 * v, 2), dtype=verts.dtype)
    out[:, 0::2] = inter_pt
    out[:, 1::2] = verts
    out_valid = np.empty((n, 2 * v), dtype=bool)
    out_valid[:, 0::2] = crossing
    out_valid[:, 1::2] = keep

    # Stable compaction of valid slots to the front, then truncate to _MAXV.
    order = np.argsort(~out_valid, axis=1, kind="stable")
    out = np.take_along_axis(out, order[..., None], axis=1)[:, :_MAXV]
    new_counts = np.minimum(out_valid.sum(axis=1), _MAXV)
    return out, new_counts


def _iou_pairs(clip_quads: np.ndarray, subj_quads: np.ndarray, areas_a: np.ndarray, areas_b: np.ndarray) -> np.ndarray:
    """IoU for aligned pairs of corner quads (Q, 4, 2)."""
    q = subj_quads.shape[0]
    verts = np.zeros((q, _MAXV, 2), dtype=np.float64)
    verts[:, :4] = subj_quads
    counts = np.full(q, 4, dtype=np.int64)
    for i in range(4):
        verts, counts = _clip_many(verts, counts, clip_quads[:, i], clip_quads[:, (i + 1) % 4])

    idx = np.arange(_MAXV)
    safe = np.maximum(counts, 1)[:, None]
    nxt_idx = (idx[None, :] + 1) % safe
    nxt = np.take_along_axis(verts, nxt_idx[..., None], axis=1)
    valid = idx[None, :] < counts[:, None]
    terms = (verts[..., 0] * nxt[..., 1] - nxt[..., 0] * verts[..., 1]) * valid
    inter = 0.5 * terms.sum(axis=1)
    inter = np.where((counts >= 3) & (inter >= DEGENERATE_AREA), inter, 0.0)
    return inter / (areas_a + areas_b - inter)


def rotated_iou_one_many(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """IoU of one ``(5,)`` box against ``(N, 5)`` boxes, vectorized."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.shape[0] == 0:
        return np.zeros((0,), dtype=np.float64)
    box = np.asarray(box, dtype=np.float64)
    clip = np.broadcast_to(obb_corners(box[None]), (boxes.shape[0], 4, 2))
    return _iou_pairs(clip, obb_corners(boxes), box[2] * box[3], boxes[:, 2] * boxes[:, 3])


def rotated_iou_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of aligned ``(N, 5)`` box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        return np.zeros((0,), dtype=np.float64)
    return _iou_pairs(obb_corners(a), obb_corners(b), a[:, 2] * a[:, 3], b[:, 2] * b[:, 3])


def rotated_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise rotated IoU between ``(N, 5)`` and ``(M, 5)`` boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        return np.zeros((n, m), dtype=np.float64)
    clip = np.repeat(obb_corners(a), m, axis=0)
    subj = np.tile(obb_corners(b), (n, 1, 1))
    areas_a = np.repeat(a[:, 2] * a[:, 3], m)
    areas_b = np.tile(b[:, 2] * b[:, 3], n)
    return _iou_pairs(clip, subj, areas_a, areas_b).reshape(n, m)


def horizontal_iou(a: HorizontalBox, b: HorizontalBox) -> float:
    """Standard axis-aligned IoU; agrees with :func:`rotated_iou` at theta=0."""
    m = horizontal_iou_matrix(a.as_array()[None], b.as_array()[None])
    return float(m[0, 0])


def horizontal_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` center-form boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax2, ay2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx2, by2 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax2[:, None], bx2) - np.maximum(ax1[:, None], bx1), 0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2) - np.maximum(ay1[:, None], by1), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + b[:, 2] * b[:, 3] - inter
    return inter / union


def rectangularize(b: OrientedBox) -> HorizontalBox:
    """Minimal axis-aligned box enclosing ``b`` (same center)."""
    c, s = abs(math.cos(b.theta)), abs(math.sin(b.theta))
    return HorizontalBox(b.cx, b.cy, b.w * c + b.h * s, b.w * s + b.h * c)


def rectangularize_array(obbs: np.ndarray) -> np.ndarray:
    """Vectorized :func:`rectangularize`: ``(N, 5)`` -> ``(N, 4)``."""
    obbs = np.asarray(obbs, dtype=np.float64)
    c, s = np.abs(np.cos(obbs[:, 4])), np.abs(np.sin(obbs[:, 4]))
    w = obbs[:, 2] * c + obbs[:, 3] * s
    h = obbs[:, 2] * s + obbs[:, 3] * c
    return np.stack([obbs[:, 0], obbs[:, 1], w, h], axis=1)


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, CCW, no repeated endpoint."""
    pts = np.unique(np.asarray(pts, dtype=np.float64), axis=0)
    if pts.shape[0] < 3:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(points):
        out: list[np.ndarray] = []
        for p in points:
            while len(out) >= 2:
                u = out[-1] - out[-2]
                v = p - out[-2]
                if u[0] * v[1] - u[1] * v[0] > 0:
                    break
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.asarray(lower[:-1] + upper[:-1])


def min_area_rect(poly: Polygon4) -> OrientedBox:
    """Smallest-area enclosing rotated rectangle, via rotating calipers.

    Raises:
        ValueError: for degenerate (collinear) polygons, which signal an
            invalid annotation.
    """
    hull = _convex_hull(poly.as_array())
    if hull.shape[0] < 3 or abs(shoelace_area(hull)) < DEGENERATE_AREA:
        raise ValueError("degenerate polygon: collinear points are not a valid annotation")
    best_area = math.inf
    best: tuple[float, float, float, float, float] | None = None
    n = hull.shape[0]
    for i in range(n):
        e = hull[(i + 1) % n] - hull[i]
        norm = math.hypot(e[0], e[1])
        if norm == 0.0:
            continue
        c, s = e[0] / norm, e[1] / norm
        # Rotate hull into the edge frame; extents give the candidate rect.
        rx = hull[:, 0] * c + hull[:, 1] * s
        ry = -hull[:, 0] * s + hull[:, 1] * c
        x1, x2 = rx.min(), rx.max()
        y1, y2 = ry.min(), ry.max()
        area = (x2 - x1) * (y2 - y1)
        if area < best_area:
            best_area = area
            mx, my = (x1 + x2) / 2.0, (y1 + y2) / 2.0
            best = (
                mx * c - my * s,
                mx * s + my * c,
                float(x2 - x1),
                float(y2 - y1),
                math.atan2(s, c),
            )
    assert best is not None
    return canonicalize(OrientedBox(*best))


def rotated_nms(
    boxes: Sequence[OrientedBox] | np.ndarray,
    scores: Sequence[float] | np.ndarray,
    iou_thr: float,
) -> list[int]:
    """Greedy rotated NMS; returns kept indices in descending score order.

    Ties in score are broken by the lower original index, so results are
    deterministic. A box is suppressed when its IoU with an already kept box
    exceeds ``iou_thr``.
    """
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
    else:
        arr = np.array([b.as_array() for b in boxes], dtype=np.float64).reshape(-1, 5)
    scores = np.asarray(scores, dtype=np.float64)
    if arr.shape[0] != scores.shape[0]:
        raise ValueError(f"{arr.shape[0]} boxes but {scores.shape[0]} scores")
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    while order.size > 0:
        i = int(order[0])
        keep.append(i)
        if order.size == 1:
            break
        rest = order[1:]
        ious = rotated_iou_one_many(arr[i], arr[rest])
        order = rest[ious <= iou_thr]
    return keep


def clip_hbb_array(boxes: np.ndarray, width: float, height: float, min_size: float = 1e-3) -> np.ndarray:
    """Clip ``(N, 4)`` center-form boxes to ``[0, width] x [0, height]``."""
    boxes = np.asarray(boxes, dtype=np.float64)
    x1 = np.clip(boxes[:, 0] - boxes[:, 2] / 2, 0.0, width)
    y1 = np.clip(boxes[:, 1] - boxes[:, 3] / 2, 0.0, height)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2] / 2, 0.0, width)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3] / 2, 0.0, height)
    w = np.maximum(x2 - x1, min_size)
    h = np.maximum(y2 - y1, min_size)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, w, h], axis=1)
