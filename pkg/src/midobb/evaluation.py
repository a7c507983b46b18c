"""Rotated IoU by convex clipping, and VOC07 11-point average precision."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import OrientedBox

AREA_EPS = 1e-12


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    class_id: int
    box: OrientedBox
    score: float


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: int
    box: OrientedBox
    difficult: bool = False


def box_to_polygon(box: OrientedBox) -> np.ndarray:
    """Corners as a (4, 2) array with positive shoelace area."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    ax, ay = 0.5 * box.w * c, 0.5 * box.w * s
    bx, by = -0.5 * box.h * s, 0.5 * box.h * c
    return np.array(
        [
            [box.cx + ax + bx, box.cy + ay + by],
            [box.cx - ax + bx, box.cy - ay + by],
            [box.cx - ax - bx, box.cy - ay - by],
            [box.cx + ax - bx, box.cy + ay - by],
        ]
    )


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def convex_clip(subject, clipper) -> np.ndarray:
    """Sutherland-Hodgman intersection of two convex positively-wound polygons."""
    out = [tuple(p) for p in np.asarray(subject, dtype=float)]
    clip = [tuple(p) for p in np.asarray(clipper, dtype=float)]
    if not out or not clip:
        return np.zeros((0, 2))
    cp1 = clip[-1]
    for cp2 in clip:
        if not out:
            break
        ex, ey = cp2[0] - cp1[0], cp2[1] - cp1[1]

        def side(p):
            return ex * (p[1] - cp1[1]) - ey * (p[0] - cp1[0])

        inp, out = out, []
        s = inp[-1]
        ss = side(s)
        for e in inp:
            se = side(e)
            if se >= 0:
                if ss < 0:
                    out.append(_cut(s, e, ss, se))
                out.append(e)
            elif ss >= 0:
                out.append(_cut(s, e, ss, se))
            s, ss = e, se
        cp1 = cp2
    return np.asarray(out, dtype=float).reshape(-1, 2)


def _cut(s, e, ss: float, se: float):
    t = ss / (ss - se)
    return (s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1]))


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    inter = polygon_area(convex_clip(box_to_polygon(a), box_to_polygon(b)))
    if inter < AREA_EPS:
        return 0.0
    union = a.area + b.area - inter
    return float(min(1.0, max(0.0, inter / union)))


def match_detections(
    dets: Sequence[DetectionRecord],
    gts: Sequence[tuple[OrientedBox, int] | GroundTruth],
    iou_thr: float = 0.5,
) -> list[tuple[DetectionRecord, bool]]:
    """Greedy VOC matching for one image.

    Returns ``(det, is_tp)`` in descending score order. A detection whose best
    candidate is a difficult ground truth is dropped from the output.
    """
    if not 0 < iou_thr <= 1:
        raise ValueError(f"iou_thr must be in (0, 1], got {iou_thr}")
    norm = [g if isinstance(g, GroundTruth) else GroundTruth("", g[1], g[0]) for g in gts]
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(norm)
    out = []
    for i in order:
        det = dets[i]
        best_j, best_iou = -1, -1.0
        for j, g in enumerate(norm):
            if g.class_id != det.class_id or (taken[j] and not g.difficult):
                continue
            iou = rotated_iou(det.box, g.box)
            if iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0 and best_iou >= iou_thr:
            if norm[best_j].difficult:
                continue
            taken[best_j] = True
            out.append((det, True))
        else:
            out.append((det, False))
    return out


def ap_voc07(tp_fp: Sequence[bool], num_gt: int) -> float:
    """11-point interpolated AP from score-ordered TP/FP flags."""
    flags = np.asarray(tp_fp, dtype=bool)
    if num_gt < 0:
        raise ValueError("num_gt must be non-negative")
    if num_gt == 0:
        if flags.any():
            raise ValueError("true positives without ground truth")
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    total = 0.0
    for k in range(11):
        sel = precision[recall >= k / 10]
        total += float(sel.max()) if sel.size else 0.0
    return total / 11


def mean_ap(per_class_ap) -> float:
    vals = list(per_class_ap.values()) if isinstance(per_class_ap, dict) else list(per_class_ap)
    if not vals:
        raise ValueError("mean_ap needs at least one class")
    return float(sum(vals) / len(vals))


def evaluate(
    gts: Iterable[GroundTruth],
    dets: Iterable[DetectionRecord],
    iou_thr: float = 0.5,
) -> dict:
    """Per-class VOC07 AP, TP/FP counts and mAP over classes present in ground truth."""
    gt_by_image: dict[str, list[GroundTruth]] = defaultdict(list)
    num_gt: dict[int, int] = defaultdict(int)
    classes: set[int] = set()
    for g in gts:
        gt_by_image[g.image_id].append(g)
        classes.add(g.class_id)
        if not g.difficult:
            num_gt[g.class_id] += 1
    det_by_image: dict[str, list[DetectionRecord]] = defaultdict(list)
    for d in dets:
        det_by_image[d.image_id].append(d)

    scored: dict[int, list[tuple[float, int, bool]]] = defaultdict(list)
    seq = 0
    for image_id in sorted(det_by_image):
        for det, is_tp in match_detections(det_by_image[image_id], gt_by_image.get(image_id, []), iou_thr):
            scored[det.class_id].append((det.score, seq, is_tp))
            seq += 1

    per_class = {}
    for cls in sorted(classes):
        if num_gt[cls] == 0:
            continue
        rows = sorted(scored.get(cls, []), key=lambda r: (-r[0], r[1]))
        flags = [r[2] for r in rows]
        per_class[cls] = {
            "ap": ap_voc07(flags, num_gt[cls]),
            "num_gt": num_gt[cls],
            "tp": int(sum(flags)),
            "fp": int(len(flags) - sum(flags)),
        }
    report = {
        "metric": "voc07",
        "iou_thr": iou_thr,
        "per_class": {str(k): v for k, v in per_class.items()},
        "mAP": mean_ap({k: v["ap"] for k, v in per_class.items()}) if per_class else 0.0,
    }
    return report
