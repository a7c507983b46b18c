"""Oriented boxes, their five-keypoint encoding and the analytic box decoder.

Coordinates are image pixels with x to the right and y downward. A box is
stored as center, extent ``w`` along the direction ``theta``, extent ``h``
along ``theta + pi/2``. The canonical form keeps ``theta`` in ``[0, pi/2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

LABELS = ("l", "t", "r", "b")
HALF_PI = 0.5 * math.pi

# sign pair mapping a midpoint onto its center (y points down)
_SHIFT_SIGNS = {
    "l": (1.0, 1.0),
    "t": (-1.0, 1.0),
    "r": (-1.0, -1.0),
    "b": (1.0, -1.0),
}

GRID_SAMPLES = 1024
ANGLE_TOL = 1e-8
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class GeometryError(ValueError):
    pass


class InvalidBoxError(GeometryError):
    pass


class DegenerateBoxError(InvalidBoxError):
    pass


class DegenerateWeightsError(GeometryError):
    pass


class DegenerateGeometryError(GeometryError):
    pass


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float
    class_id: int = 0

    @property
    def center(self) -> Point2:
        return Point2(self.cx, self.cy)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class KeypointSet:
    """Five labelled keypoints of one box.

    ``points`` and ``scores`` are keyed by ``l, t, r, b, c``; ``shifts`` by the
    four midpoint labels and hold non-negative (|dx|, |dy|) magnitudes.
    """

    points: dict[str, Point2]
    scores: dict[str, float]
    shifts: dict[str, tuple[float, float]]
    radius: float

    def midpoints(self) -> list[Point2]:
        return [self.points[k] for k in LABELS]


def canonicalize(box: OrientedBox) -> OrientedBox:
    vals = (box.cx, box.cy, box.w, box.h, box.theta)
    if not all(math.isfinite(v) for v in vals):
        raise InvalidBoxError(f"non-finite box {box}")
    if box.w <= 0 or box.h <= 0:
        raise InvalidBoxError(f"non-positive extents w={box.w} h={box.h}")
    theta = box.theta % math.pi
    if theta >= math.pi:  # -tiny % pi rounds up to pi
        theta = 0.0
    w, h = box.w, box.h
    if theta >= HALF_PI:
        w, h = h, w
        theta -= HALF_PI
        if theta >= HALF_PI:
            theta = 0.0
    return replace(box, w=w, h=h, theta=theta)


def quadrant_label(dx: float, dy: float) -> str:
    """Label of an offset from the center, with half-open quadrants.

    Directly left goes to ``l``, directly up to ``t``, directly right to ``r``
    and directly down to ``b``.
    """
    if dx < 0 and dy <= 0:
        return "l"
    if dx >= 0 and dy < 0:
        return "t"
    if dx > 0 and dy >= 0:
        return "r"
    if dx <= 0 and dy > 0:
        return "b"
    raise DegenerateGeometryError("zero offset has no quadrant")


def shift_signs(label: str) -> tuple[float, float]:
    try:
        return _SHIFT_SIGNS[label]
    except KeyError:
        raise ValueError(f"unknown midpoint label {label!r}") from None


def box_to_keypoints(box: OrientedBox) -> KeypointSet:
    box = canonicalize(box)
    c, s = math.cos(box.theta), math.sin(box.theta)
    a = (0.5 * box.w * c, 0.5 * box.w * s)
    b = (-0.5 * box.h * s, 0.5 * box.h * c)
    # label the offsets, not the summed points, so antipodal pairs stay exact
    offsets = [a, (-a[0], -a[1]), b, (-b[0], -b[1])]
    points: dict[str, Point2] = {"c": Point2(box.cx, box.cy)}
    for dx, dy in offsets:
        label = quadrant_label(dx, dy)
        if label in points:
            raise DegenerateGeometryError(f"two midpoints labelled {label!r}")
        points[label] = Point2(box.cx + dx, box.cy + dy)
    shifts = {
        k: (abs(points[k].x - box.cx), abs(points[k].y - box.cy)) for k in LABELS
    }
    radius = min(math.hypot(points[k].x - box.cx, points[k].y - box.cy) for k in LABELS)
    scores = {k: 1.0 for k in (*LABELS, "c")}
    return KeypointSet(points=points, scores=scores, shifts=shifts, radius=radius)


def apply_shift(label: str, pos: Point2, shift: tuple[float, float]) -> Point2:
    sx, sy = shift_signs(label)
    return Point2(pos.x + sx * shift[0], pos.y + sy * shift[1])


def refine_center(points: Sequence[tuple[Point2, float]]) -> Point2:
    """Confidence-weighted mean of the shifted midpoints and the raw center.

    Weights are normalized to sum to one.
    """
    pts = np.asarray([p for p, _ in points], dtype=float)
    scores = np.asarray([s for _, s in points], dtype=float)
    if np.any(scores < 0):
        raise DegenerateWeightsError("negative keypoint score")
    total = scores.sum()
    if not total > 0:
        raise DegenerateWeightsError("all keypoint scores are zero")
    weights = scores / total
    x, y = weights @ pts
    return Point2(float(x), float(y))


def _offsets(center: Point2, midpoints: Sequence[Point2]) -> np.ndarray:
    pts = np.asarray(midpoints, dtype=float).reshape(4, 2)
    return pts - np.asarray(center, dtype=float)


def _objective(theta, d: np.ndarray):
    c, s = np.cos(theta), np.sin(theta)
    # l, r measured against the axis along theta; t, b against its normal
    return (
        np.abs(c * d[0, 1] - s * d[0, 0])
        + np.abs(c * d[2, 1] - s * d[2, 0])
        + np.abs(c * d[1, 0] + s * d[1, 1])
        + np.abs(c * d[3, 0] + s * d[3, 1])
    )


def orientation_objective(theta, center: Point2, midpoints: Sequence[Point2]):
    """Summed distance of the midpoints (l, t, r, b) to the two symmetry axes.

    ``l`` and ``r`` are measured against the axis through ``center`` along
    ``(cos theta, sin theta)``; ``t`` and ``b`` against the perpendicular axis.
    Accepts a scalar or an array of angles.
    """
    val = _objective(theta, _offsets(center, midpoints))
    return float(val) if np.ndim(val) == 0 else val


def golden_section_min(f, a: float, b: float, tol: float = ANGLE_TOL) -> float:
    """Minimizer of a unimodal ``f`` on ``[a, b]``, to interval width ``tol``."""
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _kink_angles(d: np.ndarray) -> list[float]:
    # each term is |R sin(theta - phi)|, concave between its zeros, so the sum
    # attains its minimum at one of these zeros
    out = []
    for i, (dx, dy) in enumerate(d):
        if dx == 0 and dy == 0:
            continue
        ang = math.atan2(dy, dx)
        if i in (1, 3):
            ang += HALF_PI
        out.append(ang % math.pi)
    return out


def solve_orientation(center: Point2, midpoints: Sequence[Point2]) -> float:
    """Angle in ``[0, pi)`` of the l-r axis minimizing the summed deviations.

    A 1024-sample grid picks the bracket, golden-section search refines it,
    and the result is compared against the objective's kink angles.
    """
    d = _offsets(center, midpoints)
    if not np.all(np.isfinite(d)):
        raise DegenerateGeometryError("non-finite keypoints")
    if not np.any(d):
        raise DegenerateGeometryError("all midpoints coincide with the center")
    step = math.pi / GRID_SAMPLES
    grid = np.arange(GRID_SAMPLES) * step
    k = int(np.argmin(_objective(grid, d)))
    f = lambda t: float(_objective(t, d))  # noqa: E731
    best = golden_section_min(f, grid[k] - step, grid[k] + step) % math.pi
    best_val = f(best)
    for ang in _kink_angles(d):
        val = f(ang)
        if val < best_val:
            best, best_val = ang, val
    if best >= math.pi:
        best = 0.0
    return best


def refine_and_build(
    center: Point2,
    theta: float,
    midpoints: Sequence[tuple[Point2, float]],
    class_id: int = 0,
    center_score: float = 1.0,
) -> tuple[OrientedBox, float]:
    """Project midpoints (l, t, r, b) on their axes and build the scored box."""
    c, s = math.cos(theta), math.sin(theta)
    (pl, sl), (pt, st), (pr, sr), (pb, sb) = midpoints

    def along(p: Point2, ux: float, uy: float) -> float:
        return abs((p.x - center.x) * ux + (p.y - center.y) * uy)

    def weighted(d1: float, w1: float, d2: float, w2: float) -> float:
        if w1 < 0 or w2 < 0 or not w1 + w2 > 0:
            raise DegenerateWeightsError("pair scores must be non-negative with a positive sum")
        return (w1 * d1 + w2 * d2) / (w1 + w2)

    half_w = weighted(along(pl, c, s), sl, along(pr, c, s), sr)
    half_h = weighted(along(pt, -s, c), st, along(pb, -s, c), sb)
    if not (half_w > 0 and half_h > 0):
        raise DegenerateBoxError(f"zero half-extent ({half_w}, {half_h})")
    box = canonicalize(OrientedBox(center.x, center.y, 2 * half_w, 2 * half_h, theta, class_id))
    score = (sl + st + sr + sb + center_score) / 5.0
    return box, score


def _cross(ax: float, ay: float, bx: float, by: float) -> float:
    return ax * by - ay * bx


def _intersect(p: Point2, dp: tuple[float, float], q: Point2, dq: tuple[float, float]) -> Point2:
    denom = _cross(*dp, *dq)
    t = _cross(q.x - p.x, q.y - p.y, *dq) / denom
    return Point2(p.x + t * dp[0], p.y + t * dp[1])


def convex_hull(points: Sequence[Point2]) -> list[Point2]:
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return [Point2(*p) for p in pts]

    def half(seq):
        out: list = []
        for p in seq:
            while len(out) >= 2 and _cross(
                out[-1][0] - out[-2][0], out[-1][1] - out[-2][1],
                p[0] - out[-2][0], p[1] - out[-2][1],
            ) <= 0:
                out.pop()
            out.append(p)
        return out

    lower, upper = half(pts), half(reversed(pts))
    return [Point2(*p) for p in lower[:-1] + upper[:-1]]


def min_area_rect(points: Sequence[Point2], class_id: int = 0) -> OrientedBox:
    """Minimum-area enclosing rectangle by scanning the hull's edge directions."""
    hull = convex_hull(points)
    if len(hull) < 3:
        raise DegenerateGeometryError("points are collinear")
    pts = np.asarray(hull, dtype=float)
    best = None
    for i in range(len(pts)):
        e = pts[(i + 1) % len(pts)] - pts[i]
        n = math.hypot(*e)
        if n == 0:
            continue
        u = e / n
        v = np.array([-u[1], u[0]])
        pu, pv = pts @ u, pts @ v
        w, h = pu.max() - pu.min(), pv.max() - pv.min()
        if best is None or w * h < best[0]:
            mu, mv = 0.5 * (pu.max() + pu.min()), 0.5 * (pv.max() + pv.min())
            ctr = mu * u + mv * v
            best = (w * h, ctr, w, h, math.atan2(u[1], u[0]))
    _, ctr, w, h, ang = best
    return canonicalize(OrientedBox(float(ctr[0]), float(ctr[1]), float(w), float(h), ang, class_id))


def parallelogram_corners(midpoints: Sequence[Point2]) -> list[Point2]:
    """Corners from translating the l-r line through t, b and the t-b line through l, r."""
    pl, pt, pr, pb = (Point2(*p) for p in midpoints)
    da = (pr.x - pl.x, pr.y - pl.y)
    db = (pb.x - pt.x, pb.y - pt.y)
    if da == (0.0, 0.0) or db == (0.0, 0.0):
        raise DegenerateGeometryError("coincident symmetric midpoints")
    cross = _cross(*da, *db)
    if abs(cross) <= 1e-12 * math.hypot(*da) * math.hypot(*db):
        raise DegenerateGeometryError("symmetry axes are parallel")
    return [
        _intersect(pt, da, pl, db),
        _intersect(pt, da, pr, db),
        _intersect(pb, da, pr, db),
        _intersect(pb, da, pl, db),
    ]


def build_box_simple(midpoints: Sequence[Point2], class_id: int = 0) -> OrientedBox:
    """Box from the raw midpoints alone, with no orientation solve or refinement."""
    return min_area_rect(parallelogram_corners(midpoints), class_id)


def box_contains(box: OrientedBox, p: Point2, eps: float = 1e-9) -> bool:
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = p.x - box.cx, p.y - box.cy
    return (
        abs(dx * c + dy * s) <= 0.5 * box.w + eps
        and abs(-dx * s + dy * c) <= 0.5 * box.h + eps
    )


def angle_error(a: float, b: float, period: float = HALF_PI) -> float:
    d = (a - b) % period
    return min(d, period - d)
