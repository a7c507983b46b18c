"""Command line: ``midobb encode|decode|eval|synth|tile``.

Exit codes: 0 success, 2 input error, 3 internal invariant violation.
``MIDOBB_WORKERS`` sets how many images are processed concurrently.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import formats
from .evaluation import evaluate
from .formats import FormatError, ImageRecord, KeypointImage
from .heatmap import ShapeError, decode_maps, encode_targets, render_keypoint_maps
from .matcher import decode
from .synth import LayoutError, SceneSpec, make_scene, tile_image

log = logging.getLogger("midobb")

EXIT_INPUT = 2
EXIT_INTERNAL = 3


class InputError(Exception):
    pass


def workers() -> int:
    try:
        return max(1, int(os.environ.get("MIDOBB_WORKERS", "")))
    except ValueError:
        return os.cpu_count() or 1


def ordered_map(fn, items):
    """Map over items concurrently, results in input order."""
    items = list(items)
    n = min(workers(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name) or "image"


def _write_text(path: str | None, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def cmd_encode(args) -> int:
    images = formats.read_images(args.annotations)
    classes = args.classes
    if classes is None:
        classes = 1 + max((b.class_id for r in images for b in r.boxes), default=0)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    used: set[str] = set()

    def paths():
        for rec in images:
            stem = _safe_name(rec.image)
            while stem in used:
                stem += "_"
            used.add(stem)
            yield rec, out_dir / f"{stem}.mtf"

    def work(item):
        rec, path = item
        ts = encode_targets(rec.boxes, (rec.width, rec.height), args.stride, classes)
        formats.write_targets(path, ts)
        shape = [5 * classes + 14, *ts.grid_shape]
        return {"image": rec.image, "width": rec.width, "height": rec.height, "path": path.name, "shape": shape}

    entries = ordered_map(work, list(paths()))
    manifest = {"stride": args.stride, "classes": classes, "images": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    log.info("encoded %d image(s) into %s", len(entries), out_dir)
    return 0


def _decode_inputs(args):
    """Yield (image, width, height, loader) where loader returns (centers, midpoints)."""
    src = Path(args.input)
    thr_c = args.center_thresh if args.center_thresh is not None else args.score_thresh
    thr_m = args.score_thresh
    if src.suffix == ".jsonl":
        for kp in formats.read_keypoints(src):
            yield kp.image, kp.width, kp.height, (lambda kp=kp: (kp.centers, kp.midpoints))
        return
    if src.suffix == ".json":
        manifest = json.loads(src.read_text(encoding="utf-8"))
        stride = int(manifest.get("stride", args.stride))
        entries = [(e["image"], e.get("width", 0), e.get("height", 0), src.parent / e["path"]) for e in manifest["images"]]
    else:
        stride = args.stride
        entries = [(src.stem, 0, 0, src)]
    for image, width, height, path in entries:
        def load(path=path):
            ts = formats.read_targets(path)
            return decode_maps(ts, stride, args.topk, thr_c, thr_m)

        yield image, width, height, load


def cmd_decode(args) -> int:
    thr_c = args.center_thresh if args.center_thresh is not None else args.score_thresh
    thr_m = args.score_thresh
    simple = args.decoder == "simple"
    inputs = list(_decode_inputs(args))
    stats: Counter = Counter()

    def work(item):
        image, width, height, load = item
        centers, mids = load()
        local: Counter = Counter()
        dets = decode(centers, mids, thr_c, thr_m, image_id=image, simple=simple, diagnostics=local)
        return formats.image_line(formats.detection_image(image, width, height, dets)), local

    lines = []
    for line, local in ordered_map(work, inputs):
        lines.append(line + "\n")
        stats.update(local)
    _write_text(args.out, "".join(lines))
    log.info("decoded %d image(s); %d group(s), %d dropped", len(lines), stats["groups"], stats["dropped"])
    return 0


def cmd_eval(args) -> int:
    gt_images = formats.read_images(args.gt)
    det_images = formats.read_images(args.det)
    gts = formats.ground_truths(gt_images)
    dets = formats.detections(det_images)
    known = set(range(args.classes)) if args.classes is not None else {g.class_id for g in gts}
    unknown = sorted({d.class_id for d in dets} - known)
    if unknown:
        raise InputError(f"detections use unknown class ids {unknown}")
    gt_ids = {r.image for r in gt_images}
    stray = sorted({d.image_id for d in dets} - gt_ids)
    if stray:
        raise InputError(f"detections reference images missing from ground truth: {stray[:5]}")
    report = evaluate(gts, dets, args.iou_thr)
    _write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_synth(args) -> int:
    spec = SceneSpec(
        width=args.width, height=args.height, count=args.count, layout=args.layout,
        gap=args.gap, per_row=args.per_row,
        length_range=(args.length_min, args.length_max), beam_range=(args.beam_min, args.beam_max),
        angle=args.angle, jitter=args.jitter, drop=args.drop, spurious=args.spurious,
        num_classes=args.classes, seed=args.seed,
    )
    scenes = ordered_map(lambda i: make_scene(spec, i), range(args.images))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    formats.write_images(out_dir / "gt.jsonl", [gt for gt, _ in scenes])
    with open(out_dir / "keypoints.jsonl", "w", encoding="utf-8") as fh:
        for _, kp in scenes:
            fh.write(formats.keypoint_line(kp) + "\n")
    if args.maps:
        _write_maps(out_dir, [kp for _, kp in scenes], args.stride, spec.num_classes)
    return 0


def _write_maps(out_dir: Path, kps: list[KeypointImage], stride: int, classes: int) -> None:
    maps_dir = out_dir / "maps"
    maps_dir.mkdir(exist_ok=True)
    entries = []
    for kp in kps:
        ts = render_keypoint_maps(kp.centers, kp.midpoints, (kp.width, kp.height), stride, classes)
        name = f"{_safe_name(kp.image)}.mtf"
        formats.write_targets(maps_dir / name, ts)
        entries.append({"image": kp.image, "width": kp.width, "height": kp.height, "path": name,
                        "shape": [5 * classes + 14, *ts.grid_shape]})
    manifest = {"stride": stride, "classes": classes, "images": entries}
    (maps_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def cmd_tile(args) -> int:
    if not 0 <= args.overlap < args.size:
        raise InputError("tile overlap must satisfy 0 <= overlap < size")
    tiles: list[ImageRecord] = []
    for rec in formats.read_images(args.annotations):
        tiles.extend(tile_image(rec, args.size, args.overlap))
    _write_text(args.out, "".join(formats.image_line(t) + "\n" for t in tiles))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="midobb", description="Midpoint-encoded oriented box tools")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("encode", help="annotations JSONL -> target MTF files + manifest")
    e.add_argument("annotations")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--stride", type=int, default=4)
    e.add_argument("--classes", type=int, default=None, help="number of classes (default: max id + 1)")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="maps (manifest/MTF) or keypoints JSONL -> detections JSONL")
    d.add_argument("input", help="manifest.json, a .mtf file, or a keypoints .jsonl")
    d.add_argument("--out", default="-")
    d.add_argument("--stride", type=int, default=4, help="used for bare .mtf inputs")
    d.add_argument("--score-thresh", type=float, default=0.1)
    d.add_argument("--center-thresh", type=float, default=None, help="defaults to --score-thresh")
    d.add_argument("--topk", type=int, default=100, help="peaks kept per heatmap channel")
    d.add_argument("--decoder", choices=("full", "simple"), default="full")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="VOC07 AP of detections against ground truth")
    v.add_argument("gt")
    v.add_argument("det")
    v.add_argument("--iou-thr", type=float, default=0.5)
    v.add_argument("--metric", choices=("voc07",), default="voc07")
    v.add_argument("--classes", type=int, default=None)
    v.add_argument("--out", default="-")
    v.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="synthetic ground truth and noisy keypoints")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--images", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=1024)
    s.add_argument("--height", type=int, default=1024)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--layout", choices=("random", "harbor"), default="random")
    s.add_argument("--gap", type=float, default=5.0)
    s.add_argument("--per-row", type=int, default=10)
    s.add_argument("--length-min", type=float, default=40.0)
    s.add_argument("--length-max", type=float, default=160.0)
    s.add_argument("--beam-min", type=float, default=12.0)
    s.add_argument("--beam-max", type=float, default=40.0)
    s.add_argument("--angle", type=float, default=None, help="fixed scene angle in radians")
    s.add_argument("--jitter", type=float, default=0.0, help="keypoint jitter sigma in pixels")
    s.add_argument("--drop", type=float, default=0.0)
    s.add_argument("--spurious", type=float, default=0.0, help="mean spurious keypoints per image")
    s.add_argument("--classes", type=int, default=1)
    s.add_argument("--maps", action="store_true", help="also write prediction-style MTF maps")
    s.add_argument("--stride", type=int, default=4)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("tile", help="split annotations into overlapping tiles")
    t.add_argument("annotations")
    t.add_argument("--size", type=int, default=768)
    t.add_argument("--overlap", type=int, default=200)
    t.add_argument("--out", default="-")
    t.set_defaults(func=cmd_tile)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, FormatError, ShapeError, LayoutError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"midobb {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (AssertionError, ArithmeticError) as exc:
        print(f"midobb {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
