"""On-disk formats: MTF tensor files and JSONL annotations, detections, keypoints.

MTF layout: ``b"MTF1"``, a little-endian uint32 header length, a UTF-8 JSON
header ``{"dtype": "f32le", "shape": [C, H, W], "names": [...]}``, then the
row-major little-endian float32 payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .evaluation import DetectionRecord, GroundTruth
from .geometry import LABELS, OrientedBox, Point2
from .heatmap import TargetSet
from .matcher import CenterDet, MidpointDet

MAGIC = b"MTF1"


class FormatError(ValueError):
    pass


def write_mtf(path, data: np.ndarray, names: list[str] | None = None) -> None:
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 3:
        raise FormatError(f"MTF tensors are [C,H,W], got shape {arr.shape}")
    names = list(names) if names is not None else [str(i) for i in range(arr.shape[0])]
    if len(names) != arr.shape[0]:
        raise FormatError("one name per channel required")
    header = json.dumps({"dtype": "f32le", "shape": list(arr.shape), "names": names}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes())


def read_mtf(path) -> tuple[np.ndarray, list[str]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header length at offset 4")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    if 8 + hlen > len(raw):
        raise FormatError(f"{path}: header of {hlen} bytes at offset 8 runs past end of file ({len(raw)} bytes)")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable JSON header at offset 8: {exc}") from None
    if header.get("dtype") != "f32le":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    shape = header.get("shape")
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(s, int) and s >= 0 for s in shape)):
        raise FormatError(f"{path}: shape must be three non-negative ints, got {shape!r}")
    start = 8 + hlen
    expected = 4 * int(np.prod(shape))
    if len(raw) - start != expected:
        raise FormatError(
            f"{path}: payload at offset {start} holds {len(raw) - start} bytes, expected {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=start).reshape(shape).astype(np.float32)
    names = header.get("names") or [str(i) for i in range(shape[0])]
    if len(names) != shape[0]:
        raise FormatError(f"{path}: {len(names)} names for {shape[0]} channels")
    return data, list(names)


def target_channel_names(num_classes: int) -> list[str]:
    names = [f"center/{k}" for k in range(num_classes)]
    names += [f"mid/{k}/{lab}" for k in range(num_classes) for lab in LABELS]
    names += [f"shift/{lab}/{ax}" for lab in LABELS for ax in ("dx", "dy")]
    names += ["radius"]
    names += [f"mask/{r}" for r in (*LABELS, "c")]
    return names


def write_targets(path, ts: TargetSet) -> None:
    stacked = np.concatenate([ts.center_heat, ts.mid_heat, ts.shift_map, ts.radius_map, ts.pos_mask])
    write_mtf(path, stacked, target_channel_names(ts.num_classes))


def read_targets(path) -> TargetSet:
    data, names = read_mtf(path)
    k, rem = divmod(data.shape[0] - 14, 5)
    if rem or k < 1:
        raise FormatError(f"{path}: {data.shape[0]} channels do not match a K-class target layout")
    if names != target_channel_names(k) and not all(n.isdigit() for n in names):
        raise FormatError(f"{path}: unexpected channel names for a {k}-class target set")
    parts = np.split(data, np.cumsum([k, 4 * k, 8, 1]))
    return TargetSet(*parts)


def _f(obj: dict, key: str, lineno: int) -> float:
    try:
        return float(obj[key])
    except KeyError:
        raise FormatError(f"line {lineno}: missing field {key!r}") from None
    except (TypeError, ValueError):
        raise FormatError(f"line {lineno}: field {key!r} is not a number") from None


@dataclass
class ImageRecord:
    """One JSONL line: an image and its objects (annotations or detections)."""

    image: str
    width: int
    height: int
    boxes: list[OrientedBox] = field(default_factory=list)
    difficult: list[bool] = field(default_factory=list)
    scores: list[float] | None = None
    extra: dict = field(default_factory=dict)


def _iter_json_lines(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise FormatError(f"line {lineno}: expected a JSON object")
            yield lineno, obj


def read_images(path) -> list[ImageRecord]:
    out = []
    for lineno, obj in _iter_json_lines(path):
        if "image" not in obj:
            raise FormatError(f"line {lineno}: missing field 'image'")
        rec = ImageRecord(
            image=str(obj["image"]),
            width=int(_f(obj, "width", lineno)),
            height=int(_f(obj, "height", lineno)),
            extra={k: v for k, v in obj.items() if k not in ("image", "width", "height", "objects")},
        )
        objs = obj.get("objects", [])
        if not isinstance(objs, list):
            raise FormatError(f"line {lineno}: 'objects' must be a list")
        has_score = any("score" in o for o in objs)
        rec.scores = [] if has_score else None
        flags = []
        for o in objs:
            cls = o.get("class", 0)
            if not isinstance(cls, int) or cls < 0:
                raise FormatError(f"line {lineno}: class must be a non-negative integer, got {cls!r}")
            rec.boxes.append(
                OrientedBox(
                    _f(o, "cx", lineno), _f(o, "cy", lineno), _f(o, "w", lineno),
                    _f(o, "h", lineno), _f(o, "theta", lineno), cls,
                )
            )
            rec.difficult.append(bool(o.get("difficult", False)))
            if has_score:
                rec.scores.append(_f(o, "score", lineno))
            flags.append(bool(o.get("truncated", False)))
        if any(flags):
            rec.extra["truncated"] = flags
        out.append(rec)
    return out


def box_json(box: OrientedBox) -> dict:
    return {"cx": box.cx, "cy": box.cy, "w": box.w, "h": box.h, "theta": box.theta, "class": box.class_id}


def image_line(rec: ImageRecord) -> str:
    objs = []
    truncated = rec.extra.get("truncated")
    for i, box in enumerate(rec.boxes):
        o = box_json(box)
        if rec.scores is not None:
            o["score"] = rec.scores[i]
        else:
            o["difficult"] = rec.difficult[i] if i < len(rec.difficult) else False
        if truncated is not None:
            o["truncated"] = truncated[i]
        objs.append(o)
    head = {"image": rec.image, "width": rec.width, "height": rec.height}
    head.update({k: v for k, v in rec.extra.items() if k != "truncated"})
    head["objects"] = objs
    return json.dumps(head)


def write_images(path, records: Iterable[ImageRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(image_line(rec) + "\n")


def ground_truths(records: Iterable[ImageRecord]) -> list[GroundTruth]:
    return [
        GroundTruth(r.image, b.class_id, b, d)
        for r in records
        for b, d in zip(r.boxes, r.difficult or [False] * len(r.boxes))
    ]


def detections(records: Iterable[ImageRecord]) -> list[DetectionRecord]:
    out = []
    for r in records:
        scores = r.scores if r.scores is not None else [1.0] * len(r.boxes)
        out.extend(DetectionRecord(r.image, b.class_id, b, s) for b, s in zip(r.boxes, scores))
    return out


def detection_image(image: str, width: int, height: int, dets: list[DetectionRecord]) -> ImageRecord:
    dets = sorted(dets, key=lambda d: -d.score)
    return ImageRecord(image, width, height, [d.box for d in dets], [], [d.score for d in dets])


@dataclass
class KeypointImage:
    image: str
    width: int
    height: int
    centers: list[CenterDet]
    midpoints: list[MidpointDet]


def keypoint_line(kp: KeypointImage) -> str:
    return json.dumps(
        {
            "image": kp.image,
            "width": kp.width,
            "height": kp.height,
            "centers": [
                {"x": c.pos.x, "y": c.pos.y, "score": c.score, "radius": c.radius,
                 "class": c.class_id, "obj": c.source}
                for c in kp.centers
            ],
            "midpoints": [
                {"label": m.label, "x": m.pos.x, "y": m.pos.y, "score": m.score,
                 "sx": m.shift[0], "sy": m.shift[1], "class": m.class_id, "obj": m.source}
                for m in kp.midpoints
            ],
        }
    )


def read_keypoints(path) -> list[KeypointImage]:
    out = []
    for lineno, obj in _iter_json_lines(path):
        centers = [
            CenterDet(Point2(_f(c, "x", lineno), _f(c, "y", lineno)), _f(c, "score", lineno),
                      _f(c, "radius", lineno), int(c.get("class", 0)), int(c.get("obj", -1)))
            for c in obj.get("centers", [])
        ]
        mids = []
        for m in obj.get("midpoints", []):
            if m.get("label") not in LABELS:
                raise FormatError(f"line {lineno}: bad midpoint label {m.get('label')!r}")
            mids.append(
                MidpointDet(m["label"], Point2(_f(m, "x", lineno), _f(m, "y", lineno)), _f(m, "score", lineno),
                            (_f(m, "sx", lineno), _f(m, "sy", lineno)), int(m.get("class", 0)), int(m.get("obj", -1)))
            )
        out.append(KeypointImage(str(obj.get("image", lineno)), int(obj.get("width", 0)),
                                 int(obj.get("height", 0)), centers, mids))
    return out
