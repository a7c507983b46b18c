"""Midpoint-encoded oriented boxes: encoding, grouping, decoding and evaluation."""
from .evaluation import DetectionRecord, GroundTruth, ap_voc07, mean_ap, rotated_iou
from .geometry import (
    KeypointSet,
    OrientedBox,
    Point2,
    box_to_keypoints,
    build_box_simple,
    canonicalize,
    refine_and_build,
    refine_center,
    solve_orientation,
)
from .matcher import CenterDet, MidpointDet, decode, group

__version__ = "0.1.0"
