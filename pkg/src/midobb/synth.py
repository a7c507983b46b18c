"""Seeded synthetic scenes with a keypoint noise model, and overlapping image tiling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .evaluation import box_to_polygon, rotated_iou
from .formats import ImageRecord, KeypointImage
from .geometry import LABELS, OrientedBox, Point2, box_to_keypoints, canonicalize
from .matcher import CenterDet, MidpointDet

SCORE_EPS = 1e-9
MIN_SCORE = 0.05
SPURIOUS_MAX_SCORE = 0.3


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    width: int = 1024
    height: int = 1024
    count: int = 10
    layout: str = "random"  # or "harbor"
    gap: float = 5.0
    per_row: int = 10
    length_range: tuple[float, float] = (40.0, 160.0)
    beam_range: tuple[float, float] = (12.0, 40.0)
    angle: float | None = None  # fixed scene angle; None draws it uniformly
    jitter: float = 0.0
    drop: float = 0.0
    spurious: float = 0.0
    num_classes: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.drop <= 1) or self.spurious < 0 or self.jitter < 0:
            raise ValueError("drop must be in [0, 1]; jitter and spurious rate non-negative")
        if self.layout not in ("random", "harbor"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.count < 0 or self.per_row < 1 or self.num_classes < 1:
            raise ValueError("count, per_row and num_classes out of range")


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _inside(box: OrientedBox, width: float, height: float) -> bool:
    poly = box_to_polygon(box)
    return bool(poly[:, 0].min() >= 0 and poly[:, 1].min() >= 0 and poly[:, 0].max() <= width and poly[:, 1].max() <= height)


def random_layout(spec: SceneSpec, rng: np.random.Generator, max_tries: int = 200) -> list[OrientedBox]:
    boxes: list[OrientedBox] = []
    for _ in range(spec.count):
        for _ in range(max_tries):
            length = rng.uniform(*spec.length_range)
            beam = rng.uniform(*spec.beam_range)
            theta = spec.angle if spec.angle is not None else rng.uniform(0, math.pi)
            cx = rng.uniform(0, spec.width)
            cy = rng.uniform(0, spec.height)
            cls = int(rng.integers(spec.num_classes))
            box = canonicalize(OrientedBox(cx, cy, length, beam, theta, cls))
            if _inside(box, spec.width, spec.height) and all(rotated_iou(box, b) == 0 for b in boxes):
                boxes.append(box)
                break
        else:
            raise LayoutError(f"could not place {spec.count} non-overlapping objects on the canvas")
    return boxes


def harbor_layout(spec: SceneSpec, rng: np.random.Generator) -> list[OrientedBox]:
    """Rows of parallel ships moored side by side ``gap`` pixels apart."""
    phi = spec.angle if spec.angle is not None else rng.uniform(0, math.pi)
    n = spec.count
    lengths = rng.uniform(*spec.length_range, size=n)
    beams = rng.uniform(*spec.beam_range, size=n)
    classes = rng.integers(spec.num_classes, size=n)
    local = []
    y = 0.0
    for start in range(0, n, spec.per_row):
        row = range(start, min(start + spec.per_row, n))
        row_len = max(lengths[i] for i in row)
        x = 0.0
        for i in row:
            local.append((x + beams[i] / 2, y + row_len / 2))
            x += beams[i] + spec.gap
        y += row_len + spec.gap
    pts = np.asarray(local).reshape(-1, 2)
    pts -= 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    c, s = math.cos(phi), math.sin(phi)
    rot = pts @ np.array([[c, s], [-s, c]])
    boxes = []
    for i, (px, py) in enumerate(rot):
        box = canonicalize(
            OrientedBox(px + spec.width / 2, py + spec.height / 2, lengths[i], beams[i], phi + math.pi / 2, int(classes[i]))
        )
        if not _inside(box, spec.width, spec.height):
            raise LayoutError("harbor layout does not fit on the canvas")
        boxes.append(box)
    return boxes


def _score(jit: np.ndarray, sigma: float) -> float:
    if sigma == 0:
        return 1.0
    return float(np.clip(1 - np.hypot(*jit) / (6 * sigma + SCORE_EPS), MIN_SCORE, 1.0))


def noisy_keypoints(boxes: list[OrientedBox], spec: SceneSpec, rng: np.random.Generator):
    """Encode every box, then jitter, drop and pad with spurious keypoints.

    Scores fall with the position jitter magnitude. The random draw sequence
    does not depend on the noise level, so scenes stay paired across sigmas.
    """
    sigma = spec.jitter
    centers, mids = [], []
    for j, box in enumerate(boxes):
        kp = box_to_keypoints(box)
        for role in (*LABELS, "c"):
            dropped = rng.random() < spec.drop
            jit = rng.normal(0.0, 1.0, 2) * sigma
            sj = rng.normal(0.0, 1.0, 2) * sigma
            if dropped:
                continue
            p = kp.points[role]
            pos = Point2(p.x + jit[0], p.y + jit[1])
            score = _score(jit, sigma)
            if role == "c":
                centers.append(CenterDet(pos, score, kp.radius, box.class_id, j))
            else:
                cs = kp.shifts[role]
                shift = (max(0.0, cs[0] + sj[0]), max(0.0, cs[1] + sj[1]))
                mids.append(MidpointDet(role, pos, score, shift, box.class_id, j))
    for _ in range(rng.poisson(spec.spurious)):
        pos = Point2(rng.uniform(0, spec.width), rng.uniform(0, spec.height))
        score = float(rng.uniform(MIN_SCORE, SPURIOUS_MAX_SCORE))
        cls = int(rng.integers(spec.num_classes))
        role = (*LABELS, "c")[int(rng.integers(5))]
        if role == "c":
            centers.append(CenterDet(pos, score, float(rng.uniform(4, 30)), cls, -1))
        else:
            shift = (float(rng.uniform(0, 40)), float(rng.uniform(0, 40)))
            mids.append(MidpointDet(role, pos, score, shift, cls, -1))
    return centers, mids


def make_scene(spec: SceneSpec, index: int) -> tuple[ImageRecord, KeypointImage]:
    rng = scene_rng(spec.seed, index)
    layout = harbor_layout if spec.layout == "harbor" else random_layout
    boxes = layout(spec, rng)
    centers, mids = noisy_keypoints(boxes, spec, rng)
    name = f"scene_{index:05d}"
    gt = ImageRecord(name, spec.width, spec.height, boxes, [False] * len(boxes))
    return gt, KeypointImage(name, spec.width, spec.height, centers, mids)


def tile_origins(extent: int, size: int, overlap: int) -> list[int]:
    step = size - overlap
    if extent <= size:
        return [0]
    n = math.ceil((extent - size) / step) + 1
    return [i * step for i in range(n)]


def tile_image(rec: ImageRecord, size: int = 768, overlap: int = 200) -> list[ImageRecord]:
    """Split one annotated image into overlapping tiles.

    A box goes to every tile containing its center, translated into the tile
    frame. Boxes reaching past the tile border are kept whole and flagged.
    """
    if not 0 <= overlap < size:
        raise ValueError("overlap must satisfy 0 <= overlap < size")
    out = []
    for y0 in tile_origins(rec.height, size, overlap):
        for x0 in tile_origins(rec.width, size, overlap):
            tw, th = min(size, rec.width - x0), min(size, rec.height - y0)
            boxes, diff, trunc = [], [], []
            for i, b in enumerate(rec.boxes):
                if not (x0 <= b.cx < x0 + tw and y0 <= b.cy < y0 + th):
                    continue
                moved = OrientedBox(b.cx - x0, b.cy - y0, b.w, b.h, b.theta, b.class_id)
                boxes.append(moved)
                diff.append(rec.difficult[i] if i < len(rec.difficult) else False)
                trunc.append(not _inside(moved, tw, th))
            name = rec.image if (x0, y0) == (0, 0) and tw == rec.width and th == rec.height else f"{rec.image}__{x0}_{y0}"
            extra = {"tile": {"source": rec.image, "x0": x0, "y0": y0}, "truncated": trunc}
            out.append(ImageRecord(name, tw, th, boxes, diff, None, extra))
    return out
