import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midobb.evaluation import rotated_iou
from midobb.geometry import (
    LABELS,
    DegenerateBoxError,
    DegenerateGeometryError,
    DegenerateWeightsError,
    InvalidBoxError,
    OrientedBox,
    Point2,
    angle_error,
    apply_shift,
    box_contains,
    box_to_keypoints,
    build_box_simple,
    canonicalize,
    orientation_objective,
    parallelogram_corners,
    refine_and_build,
    refine_center,
    shift_signs,
    solve_orientation,
)

import oracles

boxes = st.builds(
    OrientedBox,
    cx=st.floats(50, 1000),
    cy=st.floats(50, 1000),
    w=st.floats(8, 400),
    h=st.floats(8, 400),
    theta=st.floats(-10, 10),
)


def random_box(rng, **kw):
    vals = dict(
        cx=rng.uniform(100, 900), cy=rng.uniform(100, 900),
        w=rng.uniform(8, 400), h=rng.uniform(8, 400), theta=rng.uniform(0, math.pi),
    )
    vals.update(kw)
    return canonicalize(OrientedBox(**vals))


def decode_exact(box):
    kp = box_to_keypoints(box)
    pts = [(apply_shift(k, kp.points[k], kp.shifts[k]), 1.0) for k in LABELS]
    center = refine_center(pts + [(kp.points["c"], 1.0)])
    theta = solve_orientation(center, kp.midpoints())
    return refine_and_build(center, theta, [(kp.points[k], 1.0) for k in LABELS], box.class_id)


# canonicalize

def test_canonicalize_swaps_extents():
    out = canonicalize(OrientedBox(0, 0, 2, 4, 3 * math.pi / 4))
    assert (out.w, out.h) == (4, 2)
    assert out.theta == pytest.approx(math.pi / 4)


def test_canonicalize_reduces_period():
    out = canonicalize(OrientedBox(5, 5, 3, 3, math.pi))
    assert (out.cx, out.cy, out.w, out.h, out.theta) == (5, 5, 3, 3, 0.0)


@pytest.mark.parametrize("w,h", [(0, 1), (1, -2), (math.nan, 1), (1, math.inf)])
def test_canonicalize_rejects_bad_extents(w, h):
    with pytest.raises(InvalidBoxError):
        canonicalize(OrientedBox(0, 0, w, h, 0))


@given(boxes)
def test_canonicalize_same_point_set(box):
    out = canonicalize(box)
    assert 0 <= out.theta < math.pi / 2
    assert rotated_iou(box, out) == pytest.approx(1.0, abs=1e-9)


@given(boxes)
def test_canonicalize_idempotent(box):
    once = canonicalize(box)
    assert canonicalize(once) == once


# encoding

def test_axis_aligned_keypoints():
    kp = box_to_keypoints(OrientedBox(100, 100, 40, 20, 0))
    assert kp.points["l"] == (80, 100)
    assert kp.points["t"] == (100, 90)
    assert kp.points["r"] == (120, 100)
    assert kp.points["b"] == (100, 110)
    assert kp.shifts["l"] == (20, 0)
    assert kp.radius == 10
    assert all(s == 1.0 for s in kp.scores.values())


def test_diagonal_square_keypoints():
    side = 2 * math.sqrt(2)
    kp = box_to_keypoints(OrientedBox(0, 0, side, side, math.pi / 4))
    # brute force: the midpoint of the two corners left of the center
    cs = oracles.corners(0, 0, side, side, math.pi / 4)
    edge_mids = [(cs[i] + cs[(i + 1) % 4]) / 2 for i in range(4)]
    left = min(edge_mids, key=lambda m: (m[0], m[1]))
    assert kp.points["l"] == pytest.approx(tuple(left))
    assert kp.points["l"] == pytest.approx((-1, -1))
    assert kp.shifts["l"] == pytest.approx((1, 1))
    assert kp.radius == pytest.approx(math.sqrt(2))


def _quadrant_ok(label, dx, dy):
    return {
        "l": dx < 0 and dy <= 0,
        "t": dx >= 0 and dy < 0,
        "r": dx > 0 and dy >= 0,
        "b": dx <= 0 and dy > 0,
    }[label]


@given(boxes)
def test_keypoint_invariants(box):
    kp = box_to_keypoints(box)
    c = kp.points["c"]
    for lab in LABELS:
        p = kp.points[lab]
        assert _quadrant_ok(lab, p.x - c.x, p.y - c.y)
    for a, b in (("l", "r"), ("t", "b")):
        assert kp.points[a].x + kp.points[b].x == pytest.approx(2 * c.x)
        assert kp.points[a].y + kp.points[b].y == pytest.approx(2 * c.y)
    lr = np.subtract(kp.points["r"], kp.points["l"])
    tb = np.subtract(kp.points["b"], kp.points["t"])
    assert abs(lr @ tb) <= 1e-9 * np.linalg.norm(lr) * np.linalg.norm(tb) + 1e-9
    assert kp.radius == pytest.approx(min(canonicalize(box).w, canonicalize(box).h) / 2)


@pytest.mark.parametrize(
    "label,signs", [("l", (1, 1)), ("t", (-1, 1)), ("r", (-1, -1)), ("b", (1, -1))]
)
def test_shift_signs_table(label, signs):
    assert shift_signs(label) == signs


def test_shift_signs_from_quadrants():
    # enumerate one offset per quadrant: the sign pair must point back at the center
    for label, (dx, dy) in {"l": (-3, -2), "t": (2, -3), "r": (3, 2), "b": (-2, 3)}.items():
        sx, sy = shift_signs(label)
        assert (dx + sx * abs(dx), dy + sy * abs(dy)) == (0, 0)


def test_shift_signs_rejects_unknown():
    with pytest.raises(ValueError):
        shift_signs("c")


# midpoints within a factor two of the center coordinate make p - c exact,
# and then p + sign * |p - c| lands back on c bit for bit
far_boxes = st.builds(
    OrientedBox,
    cx=st.floats(400, 4000),
    cy=st.floats(400, 4000),
    w=st.floats(8, 400),
    h=st.floats(8, 400),
    theta=st.floats(-10, 10),
)


@settings(max_examples=300)
@given(far_boxes)
def test_shift_inverts_encoding_exactly(box):
    kp = box_to_keypoints(box)
    for lab in LABELS:
        assert apply_shift(lab, kp.points[lab], kp.shifts[lab]) == kp.points["c"]


@settings(max_examples=300)
@given(boxes)
def test_shift_inverts_encoding_within_ulps(box):
    # near the origin the subtraction p - c can round; the error stays at ulp scale
    kp = box_to_keypoints(box)
    c = kp.points["c"]
    for lab in LABELS:
        back = apply_shift(lab, kp.points[lab], kp.shifts[lab])
        p = kp.points[lab]
        for got, want, q in ((back.x, c.x, p.x), (back.y, c.y, p.y)):
            assert abs(got - want) <= 2 * math.ulp(max(abs(q), abs(want)))


def test_shift_inverts_falsifying_case():
    # found by hypothesis: r lies above 64 where the ulp doubles, so c's last bit is lost
    kp = box_to_keypoints(OrientedBox(50.61069211649656, 50.0, 129.0, 8.0, 0.0))
    back = apply_shift("r", kp.points["r"], kp.shifts["r"])
    assert abs(back.x - 50.61069211649656) <= math.ulp(64.0)
    assert back.y == 50.0


# center refinement

def test_refine_center_coincident():
    p = Point2(10, 10)
    assert refine_center([(p, s) for s in (0.2, 0.5, 1, 0.1, 0.9)]) == (10, 10)


def test_refine_center_symmetric():
    pts = [(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1)]
    assert refine_center([(Point2(*p), 0.7) for p in pts]) == pytest.approx((0, 0))


def test_refine_center_weighted():
    mids = [(1, 0), (0, 1), (-1, 0), (0, -1)]
    pts = [(Point2(*p), 1.0) for p in mids] + [(Point2(1, 1), 4.0)]
    # weights 1/8 each for the midpoints, 1/2 for the center
    assert refine_center(pts) == pytest.approx((0.5, 0.5))


def test_refine_center_zero_scores():
    with pytest.raises(DegenerateWeightsError):
        refine_center([(Point2(0, 0), 0.0)] * 5)


@given(
    st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.01, 1)), min_size=5, max_size=5),
    st.floats(0.01, 100),
)
def test_refine_center_scale_invariant(rows, scale):
    pts = [(Point2(x, y), s) for x, y, s in rows]
    scaled = [(p, s * scale) for p, s in pts]
    assert refine_center(scaled) == pytest.approx(refine_center(pts), abs=1e-9)
    xs = [p.x for p, _ in pts]
    ys = [p.y for p, _ in pts]
    c = refine_center(pts)
    assert min(xs) - 1e-9 <= c.x <= max(xs) + 1e-9
    assert min(ys) - 1e-9 <= c.y <= max(ys) + 1e-9


# orientation

def test_objective_zero_at_true_angle():
    box = canonicalize(OrientedBox(50, 60, 30, 12, 0.7))
    kp = box_to_keypoints(box)
    theta = math.atan2(kp.points["r"].y - kp.points["l"].y, kp.points["r"].x - kp.points["l"].x)
    assert orientation_objective(theta, kp.points["c"], kp.midpoints()) == pytest.approx(0, abs=1e-12)


def test_objective_point_on_axis_contributes_nothing():
    c = Point2(0, 0)
    mids = [Point2(-3, 0), Point2(0.5, -2), Point2(4, 1), Point2(-1, 2)]
    moved = [Point2(-7, 0), *mids[1:]]
    assert orientation_objective(0.0, c, mids) == pytest.approx(orientation_objective(0.0, c, moved))


def test_objective_hand_value():
    mids = [Point2(-1, 0.1), Point2(0.1, -1), Point2(1, 0.1), Point2(0.1, 1)]
    val = orientation_objective(0.0, Point2(0, 0), mids)
    ref = sum(oracles.point_line_distance(m, [0, 0], d) for m, d in zip(mids, [(1, 0), (0, 1), (1, 0), (0, 1)]))
    assert val == pytest.approx(0.4)
    assert ref == pytest.approx(0.4)


@given(
    st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=5, max_size=5),
    st.floats(0.01, math.pi / 2 - 0.01) | st.floats(math.pi / 2 + 0.01, math.pi - 0.01),
)
def test_objective_matches_slope_form(pts, theta):
    c, *mids = [Point2(*p) for p in pts]
    k = math.tan(theta)
    assert orientation_objective(theta, c, mids) == pytest.approx(oracles.slope_objective(k, c, mids), rel=1e-9, abs=1e-9)


@given(
    st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=5, max_size=5),
    st.floats(-10, 10),
)
def test_objective_period_pi(pts, theta):
    c, *mids = [Point2(*p) for p in pts]
    assert orientation_objective(theta, c, mids) == pytest.approx(orientation_objective(theta + math.pi, c, mids), abs=1e-9)


def test_solve_orientation_exact_box():
    box = OrientedBox(0, 0, 30, 10, 0.3)
    kp = box_to_keypoints(box)
    assert solve_orientation(kp.points["c"], kp.midpoints()) == pytest.approx(0.3, abs=1e-6)


def test_solve_orientation_axis_aligned():
    mids = [Point2(-1, 0), Point2(0, -1), Point2(1, 0), Point2(0, 1)]
    theta = solve_orientation(Point2(0, 0), mids)
    assert angle_error(theta, 0.0, math.pi) <= 1e-8


def test_solve_orientation_degenerate():
    with pytest.raises(DegenerateGeometryError):
        solve_orientation(Point2(1, 1), [Point2(1, 1)] * 4)


def test_solve_orientation_vs_dense_grid():
    rng = np.random.default_rng(7)
    for _ in range(60):
        box = random_box(rng)
        kp = box_to_keypoints(box)
        c = kp.points["c"]
        mids = [Point2(p.x + rng.normal(0, 3), p.y + rng.normal(0, 3)) for p in kp.midpoints()]
        theta = solve_orientation(c, mids)
        grid_theta, grid_val = oracles.dense_grid_objective(c, mids)
        assert orientation_objective(theta, c, mids) <= grid_val + 1e-9
        assert 0 <= theta < math.pi


# refinement and box construction

def test_refine_and_build_recovers_box():
    box = canonicalize(OrientedBox(200, 150, 60, 25, 1.1, class_id=3))
    out, score = decode_exact(box)
    assert rotated_iou(box, out) >= 0.999
    assert out.class_id == 3
    assert score == 1.0


def test_refine_and_build_weighted_pair():
    box = OrientedBox(100, 100, 40, 20, 0)
    kp = box_to_keypoints(box)
    mids = [(kp.points[k], 1.0) for k in LABELS]
    mids[0] = (Point2(78, 100), 1.0)  # l pushed 2px outward: D_l = 22, D_r = 20
    out, score = refine_and_build(Point2(100, 100), 0.0, mids, center_score=1.0)
    assert out.w == pytest.approx(2 * (22 + 20) / 2)
    assert out.h == pytest.approx(20)
    assert score == 1.0


def test_refine_and_build_zero_weight_side():
    mids = [(Point2(70, 100), 0.0), (Point2(100, 90), 1), (Point2(121, 100), 0.5), (Point2(100, 110), 1)]
    out, score = refine_and_build(Point2(100, 100), 0.0, mids, center_score=0.5)
    assert out.w == pytest.approx(42)
    assert score == pytest.approx((0 + 1 + 0.5 + 1 + 0.5) / 5)


def test_refine_and_build_degenerate():
    mids = [(Point2(90, 100), 0.0), (Point2(100, 90), 1), (Point2(110, 100), 0.0), (Point2(100, 110), 1)]
    with pytest.raises(DegenerateWeightsError):
        refine_and_build(Point2(100, 100), 0.0, mids)
    flat = [(Point2(100, 100), 1.0)] * 2 + [(Point2(100, 100), 1.0)] * 2
    with pytest.raises(DegenerateBoxError):
        refine_and_build(Point2(100, 100), 0.0, flat)


def test_round_trip_random_boxes():
    rng = np.random.default_rng(11)
    for _ in range(300):
        box = random_box(rng)
        out, _ = decode_exact(box)
        assert rotated_iou(box, out) >= 0.999
        assert angle_error(box.theta, out.theta) <= 1e-4


def test_simple_builder_exact():
    box = canonicalize(OrientedBox(40, 50, 36, 14, 0.9))
    out = build_box_simple(box_to_keypoints(box).midpoints())
    assert rotated_iou(box, out) == pytest.approx(1.0, abs=1e-9)
    assert (out.w, out.h) == pytest.approx((box.w, box.h))
    assert out.theta == pytest.approx(box.theta)


def test_simple_builder_unit_square():
    mids = [Point2(-1, 0), Point2(0, -1), Point2(1, 0), Point2(0, 1)]
    out = build_box_simple(mids)
    assert (out.cx, out.cy, out.w, out.h, out.theta) == pytest.approx((0, 0, 2, 2, 0), abs=1e-12)


def test_simple_builder_encloses_parallelogram():
    rng = np.random.default_rng(3)
    for _ in range(100):
        box = random_box(rng)
        mids = [Point2(p.x + rng.normal(0, 2), p.y + rng.normal(0, 2)) for p in box_to_keypoints(box).midpoints()]
        out = build_box_simple(mids)
        for corner in parallelogram_corners(mids):
            assert oracles.inside(np.array([corner]), OrientedBox(out.cx, out.cy, out.w + 1e-6, out.h + 1e-6, out.theta))[0]
            assert box_contains(out, corner, eps=1e-6)


def test_simple_builder_parallel_axes():
    with pytest.raises(DegenerateGeometryError):
        build_box_simple([Point2(0, 0), Point2(1, 1), Point2(2, 2), Point2(3, 3)])
