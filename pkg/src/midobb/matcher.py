"""Grouping of predicted centers and midpoints into objects, and box decoding."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .evaluation import DetectionRecord
from .geometry import (
    LABELS,
    GeometryError,
    OrientedBox,
    Point2,
    apply_shift,
    build_box_simple,
    refine_and_build,
    refine_center,
    solve_orientation,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MidpointDet:
    label: str
    pos: Point2
    score: float
    shift: tuple[float, float]
    class_id: int = 0
    source: int = -1  # originating object for synthetic data; ignored by matching


@dataclass(frozen=True)
class CenterDet:
    pos: Point2
    score: float
    radius: float
    class_id: int = 0
    source: int = -1


@dataclass(frozen=True)
class GroupedObject:
    center: CenterDet
    chosen: dict[str, MidpointDet]


def shifted_position(det: MidpointDet) -> Point2:
    return apply_shift(det.label, det.pos, det.shift)


def assign(centers: Sequence[CenterDet], midpoints: Sequence[MidpointDet]) -> list[tuple[int, float] | None]:
    """Nearest same-class center for each midpoint, or None when out of radius.

    Distances run from the midpoint's shifted position. Equidistant centers
    resolve to the earlier one.
    """
    out: list[tuple[int, float] | None] = []
    for m in midpoints:
        sp = shifted_position(m)
        best, best_d = -1, math.inf
        for j, c in enumerate(centers):
            if c.class_id != m.class_id:
                continue
            d = math.hypot(sp.x - c.pos.x, sp.y - c.pos.y)
            if d < best_d:
                best, best_d = j, d
        if best >= 0 and best_d <= centers[best].radius:
            out.append((best, best_d))
        else:
            out.append(None)
    return out


def group(
    centers: Sequence[CenterDet],
    midpoints: Sequence[MidpointDet],
    center_thresh: float = 0.1,
    midpoint_thresh: float = 0.1,
) -> list[GroupedObject]:
    cs = [c for c in centers if c.score >= center_thresh]
    ms = [m for m in midpoints if m.score >= midpoint_thresh]
    # per center and label: (score, -distance, -input index) ranks the keeper
    best: dict[tuple[int, str], tuple[tuple[float, float, int], MidpointDet]] = {}
    for i, (m, hit) in enumerate(zip(ms, assign(cs, ms))):
        if hit is None:
            continue
        j, d = hit
        key = (m.score, -d, -i)
        slot = (j, m.label)
        if slot not in best or key > best[slot][0]:
            best[slot] = (key, m)
    groups = []
    for j, c in enumerate(cs):
        chosen = {lab: best[(j, lab)][1] for lab in LABELS if (j, lab) in best}
        if len(chosen) == 4:
            groups.append(GroupedObject(c, chosen))
    groups.sort(key=lambda g: -g.center.score)
    return groups


def build_group(obj: GroupedObject, simple: bool = False) -> tuple[OrientedBox, float]:
    mids = [obj.chosen[k] for k in LABELS]
    cls = obj.center.class_id
    if simple:
        box =build_box_simple([m.pos for m in mids], cls)
        score = (sum(m.score for m in mids) + obj.center.score) / 5.0
        return box, score
    pts = [(shifted_position(m), m.score) for m in mids]
    pts.append((obj.center.pos, obj.center.score))
    center = refine_center(pts)
    theta = solve_orientation(center, [m.pos for m in mids])
    return refine_and_build(center, theta, [(m.pos, m.score) for m in mids], cls, obj.center.score)


def decode(
    centers: Sequence[CenterDet],
    midpoints: Sequence[MidpointDet],
    center_thresh: float = 0.1,
    midpoint_thresh: float = 0.1,
    image_id: str = "",
    simple: bool = False,
    diagnostics: Counter | None = None,
) -> list[DetectionRecord]:
    """Group keypoints and turn every complete group into a scored oriented box.

    ``simple=True`` swaps the orientation solve and refinement for the plain
    parallelogram construction. Groups whose box cannot be built are skipped
    and counted under ``"dropped"`` in ``diagnostics``.
    """
    records = []
    dropped = 0
    for obj in group(centers, midpoints, center_thresh, midpoint_thresh):
        try:
            box, score = build_group(obj, simple)
        except GeometryError as exc:
            dropped += 1
            log.debug("dropping group at %s: %s", obj.center.pos, exc)
            continue
        records.append(DetectionRecord(image_id, box.class_id, box, score))
    if dropped:
        log.info("%d group(s) dropped during box construction", dropped)
    if diagnostics is not None:
        diagnostics["groups"] += len(records) + dropped
        diagnostics["dropped"] += dropped
    records.sort(key=lambda r: -r.score)
    return records
