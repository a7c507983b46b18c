"""Training targets from oriented boxes, keypoint decoding from dense maps, losses.

All maps are float32 arrays shaped ``[channels, height, width]`` on the
stride-downsampled grid. Shift and radius maps are stored in grid units.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import LABELS, GeometryError, OrientedBox, Point2, box_to_keypoints
from .matcher import CenterDet, MidpointDet

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-6
ROLES = (*LABELS, "c")


class ShapeError(ValueError):
    pass


@dataclass
class TargetSet:
    center_heat: np.ndarray  # [K, H, W]
    mid_heat: np.ndarray  # [4K, H, W], l t r b per class
    shift_map: np.ndarray  # [8, H, W], (dx, dy) per label
    radius_map: np.ndarray  # [1, H, W]
    pos_mask: np.ndarray  # [5, H, W], l t r b c

    def __post_init__(self):
        k, h, w = np.shape(self.center_heat)
        expected = {
            "mid_heat": (4 * k, h, w),
            "shift_map": (8, h, w),
            "radius_map": (1, h, w),
            "pos_mask": (5, h, w),
        }
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ShapeError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    @property
    def num_classes(self) -> int:
        return self.center_heat.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.center_heat.shape[1], self.center_heat.shape[2]

    @classmethod
    def zeros(cls, num_classes: int, grid_h: int, grid_w: int) -> "TargetSet":
        z = lambda c: np.zeros((c, grid_h, grid_w), dtype=np.float32)  # noqa: E731
        return cls(z(num_classes), z(4 * num_classes), z(8), z(1), z(5))


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.25
    focal_a: float = 2.0
    focal_b: float = 4.0


def grid_size(image_size: tuple[int, int], stride: int) -> tuple[int, int]:
    """Grid (height, width) for an image given as (width, height)."""
    width, height = image_size
    return max(1, math.ceil(height / stride)), max(1, math.ceil(width / stride))


def render_gaussian(heat: np.ndarray, center_px: tuple[int, int], sigma: float) -> np.ndarray:
    """Max-compose an unnormalized Gaussian peaked at ``center_px`` (x, y) into ``heat`` in place."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    h, w = heat.shape
    x, y = int(center_px[0]), int(center_px[1])
    cx, cy = min(max(x, 0), w - 1), min(max(y, 0), h - 1)
    if (cx, cy) != (x, y):
        log.warning("gaussian center %s outside %dx%d grid, clamped", (x, y), w, h)
    reach = int(math.floor(3 * sigma))
    x0, x1 = max(cx - reach, 0), min(cx + reach, w - 1)
    y0, y1 = max(cy - reach, 0), min(cy + reach, h - 1)
    yy, xx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    g = np.exp(-d2 / (2 * sigma * sigma))
    g[d2 > 9 * sigma * sigma] = 0.0
    patch = heat[y0 : y1 + 1, x0 : x1 + 1]
    np.maximum(patch, g.astype(heat.dtype), out=patch)
    return heat


def gaussian_sigma(radius: float, stride: int) -> float:
    return max(1.0, radius / (3.0 * stride))


def _cell(p: Point2, stride: int, grid_hw: tuple[int, int]) -> tuple[int, int]:
    gx, gy = math.floor(p.x / stride), math.floor(p.y / stride)
    h, w = grid_hw
    cx, cy = min(max(gx, 0), w - 1), min(max(gy, 0), h - 1)
    if (cx, cy) != (gx, gy):
        log.warning("keypoint %s falls outside the grid, clamped", tuple(p))
    return cx, cy


def encode_targets(
    annotations: Sequence[OrientedBox],
    image_size: tuple[int, int],
    stride: int = 4,
    num_classes: int = 1,
) -> TargetSet:
    """Heatmaps, shift, radius and positive-mask targets for one image of (width, height)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    gh, gw = grid_size(image_size, stride)
    ts = TargetSet.zeros(num_classes, gh, gw)
    for box in annotations:
        if not 0 <= box.class_id < num_classes:
            raise ValueError(f"class id {box.class_id} outside [0, {num_classes})")
        try:
            kp = box_to_keypoints(box)
        except GeometryError as exc:
            log.warning("skipping degenerate box %s: %s", box, exc)
            continue
        sigma = gaussian_sigma(kp.radius, stride)
        for i, lab in enumerate(LABELS):
            gx, gy = _cell(kp.points[lab], stride, (gh, gw))
            render_gaussian(ts.mid_heat[4 * box.class_id + i], (gx, gy), sigma)
            ts.shift_map[2 * i, gy, gx] = kp.shifts[lab][0] / stride
            ts.shift_map[2 * i + 1, gy, gx] = kp.shifts[lab][1] / stride
            ts.pos_mask[i, gy, gx] = 1.0
        gx, gy = _cell(kp.points["c"], stride, (gh, gw))
        render_gaussian(ts.center_heat[box.class_id], (gx, gy), sigma)
        ts.radius_map[0, gy, gx] = kp.radius / stride
        ts.pos_mask[4, gy, gx] = 1.0
    return ts


def extract_peaks(heat: np.ndarray, topk: int = 100, thresh: float = 0.1) -> list[tuple[int, int, int, float]]:
    """Local maxima ``(channel, px, py, score)``, at most ``topk`` per channel.

    A pixel is a peak when it is >= every 3x3 neighbor; zero-valued pixels are
    never peaks. Order is score descending, then channel, row and column.
    """
    if topk < 1:
        raise ValueError("topk must be >= 1")
    heat = np.asarray(heat)
    if heat.ndim == 2:
        heat = heat[None]
    c, h, w = heat.shape
    padded = np.full((c, h + 2, w + 2), -np.inf, dtype=np.float64)
    padded[:, 1:-1, 1:-1] = heat
    neigh = np.full((c, h, w), -np.inf)
    for dy in range(3):
        for dx in range(3):
            if dy == 1 and dx == 1:
                continue
            np.maximum(neigh, padded[:, dy : dy + h, dx : dx + w], out=neigh)
    is_peak = (heat >= neigh) & (heat >= thresh) & (heat > 0)
    peaks = []
    for ch in range(c):
        ys, xs = np.nonzero(is_peak[ch])
        vals = heat[ch, ys, xs]
        order = np.lexsort((xs, ys, -vals))[:topk]
        peaks.extend((ch, int(xs[i]), int(ys[i]), float(vals[i])) for i in order)
    peaks.sort(key=lambda p: (-p[3], p[0], p[2], p[1]))
    return peaks


def decode_maps(
    pred: TargetSet,
    stride: int = 4,
    topk: int = 100,
    center_thresh: float = 0.1,
    midpoint_thresh: float = 0.1,
) -> tuple[list[CenterDet], list[MidpointDet]]:
    """Turn predicted maps into center and midpoint detections in image pixels."""
    centers = []
    for ch, px, py, score in extract_peaks(pred.center_heat, topk, center_thresh):
        radius = max(1.0, float(pred.radius_map[0, py, px]) * stride)
        pos = Point2((px + 0.5) * stride, (py + 0.5) * stride)
        centers.append(CenterDet(pos, score, radius, ch))
    midpoints = []
    for ch, px, py, score in extract_peaks(pred.mid_heat, topk, midpoint_thresh):
        cls, i = divmod(ch, 4)
        shift = (
            float(pred.shift_map[2 * i, py, px]) * stride,
            float(pred.shift_map[2 * i + 1, py, px]) * stride,
        )
        pos = Point2((px + 0.5) * stride, (py + 0.5) * stride)
        midpoints.append(MidpointDet(LABELS[i], pos, score, shift, cls))
    return centers, midpoints


def render_keypoint_maps(
    centers: Sequence[CenterDet],
    midpoints: Sequence[MidpointDet],
    image_size: tuple[int, int],
    stride: int = 4,
    num_classes: int = 1,
    sigma: float = 1.0,
) -> TargetSet:
    """Prediction-style maps whose peaks carry the given keypoint scores."""
    gh, gw = grid_size(image_size, stride)
    ts = TargetSet.zeros(num_classes, gh, gw)
    scratch = np.zeros((gh, gw), dtype=np.float32)
    for c in centers:
        gx, gy = _cell(c.pos, stride, (gh, gw))
        scratch[:] = 0
        render_gaussian(scratch, (gx, gy), sigma)
        np.maximum(ts.center_heat[c.class_id], scratch * c.score, out=ts.center_heat[c.class_id])
        ts.radius_map[0, gy, gx] = c.radius / stride
        ts.pos_mask[4, gy, gx] = 1.0
    for m in midpoints:
        i = LABELS.index(m.label)
        gx, gy = _cell(m.pos, stride, (gh, gw))
        scratch[:] = 0
        render_gaussian(scratch, (gx, gy), sigma)
        ch = ts.mid_heat[4 * m.class_id + i]
        np.maximum(ch, scratch * m.score, out=ch)
        ts.shift_map[2 * i, gy, gx] = m.shift[0] / stride
        ts.shift_map[2 * i + 1, gy, gx] = m.shift[1] / stride
        ts.pos_mask[i, gy, gx] = 1.0
    return ts


def _check_shapes(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"shape mismatch: {sorted(shapes)}")


def focal_loss(pred_heat, target_heat, a_f: float = 2.0, b_f: float = 4.0) -> float:
    """Penalty-reduced focal loss normalized by the number of peak pixels."""
    _check_shapes(pred_heat, target_heat)
    p = np.clip(np.asarray(pred_heat, dtype=np.float64), CLAMP_EPS, 1 - CLAMP_EPS)
    t = np.asarray(target_heat, dtype=np.float64)
    pos = t == 1
    n = max(1, int(pos.sum()))
    pos_term = ((1 - p[pos]) ** a_f * np.log(p[pos])).sum()
    neg = ~pos
    neg_term = ((1 - t[neg]) ** b_f * p[neg] ** a_f * np.log(1 - p[neg])).sum()
    return float(-(pos_term + neg_term) / n)


def l1_masked(pred, target, mask) -> float:
    _check_shapes(pred, target, mask)
    m = np.asarray(mask, dtype=np.float64)
    diff = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    return float((m * diff).sum() / max(1.0, m.sum()))


def total_loss(parts: Sequence[float], weights: LossWeights = LossWeights()) -> float:
    """Midpoint heat + alpha * center heat + shift L1 + beta * radius L1."""
    l_m, l_c, l_cs, l_r = parts
    if min(parts) < 0:
        raise ValueError(f"loss parts must be non-negative, got {tuple(parts)}")
    return l_m + weights.alpha * l_c + l_cs + weights.beta * l_r


def loss_parts(pred: TargetSet, target: TargetSet, weights: LossWeights = LossWeights()) -> tuple[float, float, float, float]:
    """(midpoint focal, center focal, shift L1, radius L1) for probability-valued heatmaps."""
    l_m = focal_loss(pred.mid_heat, target.mid_heat, weights.focal_a, weights.focal_b)
    l_c = focal_loss(pred.center_heat, target.center_heat, weights.focal_a, weights.focal_b)
    shift_mask = np.repeat(target.pos_mask[:4], 2, axis=0)
    l_cs = l1_masked(pred.shift_map, target.shift_map, shift_mask)
    l_r = l1_masked(pred.radius_map, target.radius_map, target.pos_mask[4:5])
    return l_m, l_c, l_cs, l_r
