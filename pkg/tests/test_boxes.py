"""Box overlap, suppression, assignment, AP and detection I/O tests.

The overlap tests use boxes whose intersection is computable by hand
(axis-aligned offsets, 45-degree rotations); suppression is checked
against a literal O(n^2) re-derivation over random detection sets; the
AP test freezes a fully hand-worked 3-detection / 2-ground-truth
example whose AP-40 is exactly 5/6.
"""

import numpy as np
import pytest

from pointfuse.boxes import (
    Assignment,
    Box3D,
    BoxError,
    CLASSES,
    CLASS_IOU_THRESHOLD,
    CLS_NEGATIVE_IOU,
    CLS_POSITIVE_IOU,
    DEFAULT_ANCHORS,
    DetectionResult,
    GroundTruth,
    REG_ACTIVE_IOU,
    assign_proposals,
    average_precision_40,
    box_from_array,
    clip_convex,
    format_detection_row,
    iou_3d,
    iou_bev,
    nms,
    normalize_angle,
    parse_detection_row,
    polygon_area,
    read_detections,
    write_detections,
)


def make_box(x=0.0, y=0.0, z=0.0, l=4.0, w=2.0, h=1.5, yaw=0.0):
    return Box3D(x, y, z, l, w, h, yaw)


# -- box basics -----------------------------------------------------------------


def test_box_validation_and_yaw_wrap():
    with pytest.raises(BoxError):
        make_box(l=0.0)
    with pytest.raises(BoxError):
        make_box(h=-1.0)
    with pytest.raises(BoxError):
        Box3D(np.inf, 0, 0, 1, 1, 1, 0)
    assert make_box(yaw=3.0 * np.pi).yaw == pytest.approx(np.pi)
    assert normalize_angle(-np.pi) == pytest.approx(np.pi)
    assert normalize_angle(0.5) == 0.5


def test_bev_corners_counter_clockwise_and_rotated():
    box = make_box(l=4.0, w=2.0)
    corners = box.bev_corners()
    assert polygon_area(corners) == pytest.approx(8.0)
    # CCW: positive signed shoelace sum
    x, y = corners[:, 0], corners[:, 1]
    signed = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    assert signed > 0
    quarter = make_box(yaw=np.pi / 2).bev_corners()
    # rotating by 90 degrees swaps the extents
    assert np.max(np.abs(quarter[:, 0])) == pytest.approx(1.0)
    assert np.max(np.abs(quarter[:, 1])) == pytest.approx(2.0)


def test_contains_is_box_frame_aligned():
    box = make_box(l=4.0, w=2.0, h=2.0, yaw=np.pi / 2)
    inside = box.contains(np.array([[0.0, 1.9, 0.0], [1.9, 0.0, 0.0]]))
    assert inside.tolist() == [True, False]
    assert box.contains(np.array([0.0, 2.5, 0.0]), inflate=1.5)[0]


def test_box_array_round_trip():
    box = make_box(x=1.0, y=-2.0, z=0.5, yaw=0.3)
    back = box_from_array(box.as_array())
    assert np.array_equal(back.as_array(), box.as_array())


# -- polygon clipping and IoU ------------------------------------------------------


def test_clip_convex_square_overlap():
    a = np.array([[0.0, 0], [2, 0], [2, 2], [0, 2]])
    b = np.array([[1.0, 1], [3, 1], [3, 3], [1, 3]])
    inter = clip_convex(a, b)
    assert polygon_area(inter) == pytest.approx(1.0)
    far = b + 10.0
    assert polygon_area(clip_convex(a, far)) == 0.0


def test_iou_bev_axis_aligned_closed_form():
    a = make_box(l=4.0, w=2.0)
    b = make_box(x=2.0, l=4.0, w=2.0)  # half-length shift: overlap 4
    assert iou_bev(a, b) == pytest.approx(4.0 / 12.0)
    assert iou_bev(a, a) == pytest.approx(1.0)
    assert iou_bev(a, make_box(x=100.0)) == 0.0


def test_iou_bev_rotated_square_closed_form():
    # unit squares, one rotated 45 degrees about the shared centre:
    # intersection is a regular octagon of area 8*(sqrt(2)-1)/2 = 0.8284...
    a = make_box(l=2.0, w=2.0)
    b = make_box(l=2.0, w=2.0, yaw=np.pi / 4)
    inter = 4.0 * (2.0 * np.sqrt(2.0) - 2.0)
    assert iou_bev(a, b) == pytest.approx(inter / (8.0 - inter), rel=1e-9)


def test_iou_3d_separates_in_height():
    a = make_box(h=2.0)
    b = make_box(z=1.0, h=2.0)  # half-height offset
    bev_only = iou_bev(a, b)
    assert bev_only == pytest.approx(1.0)
    assert iou_3d(a, b) == pytest.approx(1.0 / 3.0)  # overlap 1 of (2+2-1)
    assert iou_3d(a, make_box(z=5.0)) == 0.0


def test_iou_is_symmetric():
    rng = np.random.default_rng(30)
    for _ in range(20):
        a = make_box(*rng.uniform(-2, 2, size=3), *rng.uniform(1, 4, size=3), rng.uniform(-np.pi, np.pi))
        b = make_box(*rng.uniform(-2, 2, size=3), *rng.uniform(1, 4, size=3), rng.uniform(-np.pi, np.pi))
        assert iou_bev(a, b) == pytest.approx(iou_bev(b, a), abs=1e-12)
        assert iou_3d(a, b) == pytest.approx(iou_3d(b, a), abs=1e-12)


# -- nms ------------------------------------------------------------------------


def nms_oracle(dets, thr, overlap="bev"):
    """Independent quadratic pass: visit by (-score, index), keep unless
    overlapping a kept box."""
    iou_fn = iou_bev if overlap == "bev" else iou_3d
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        if all(iou_fn(dets[i].box, dets[k].box) <= thr for k in kept):
            kept.append(i)
    return kept


def random_detections(rng, n):
    dets = []
    for _ in range(n):
        box = make_box(x=float(rng.uniform(0, 12)), y=float(rng.uniform(-4, 4)),
                       z=float(rng.uniform(-0.5, 0.5)),
                       l=float(rng.uniform(2, 5)), w=float(rng.uniform(1, 3)),
                       h=float(rng.uniform(1, 2)), yaw=float(rng.uniform(-np.pi, np.pi)))
        # quantised scores so ties actually occur
        dets.append(DetectionResult(box, round(float(rng.uniform(0, 1)), 1), "Car"))
    return dets


def test_nms_matches_oracle_on_random_sets():
    rng = np.random.default_rng(31)
    for trial in range(60):
        dets = random_detections(rng, int(rng.integers(1, 12)))
        thr = float(rng.uniform(0.05, 0.7))
        for overlap in ("bev", "3d"):
            assert nms(dets, thr, overlap) == nms_oracle(dets, thr, overlap), f"trial {trial}"


def test_nms_keeps_identical_boxes_only_once():
    box = make_box()
    dets = [DetectionResult(box, 0.9, "Car"), DetectionResult(box, 0.8, "Car")]
    assert nms(dets, 0.5) == [0]
    # strict >: IoU exactly at the threshold is kept
    b = make_box(x=2.0)  # IoU 1/3 with a
    dets = [DetectionResult(make_box(), 0.9, "Car"), DetectionResult(b, 0.8, "Car")]
    assert nms(dets, 1.0 / 3.0) == [0, 1]


def test_nms_empty_input():
    assert nms([], 0.5) == []


# -- assignment ------------------------------------------------------------------


def test_assignment_thresholds():
    assert (CLS_POSITIVE_IOU, CLS_NEGATIVE_IOU, REG_ACTIVE_IOU) == (0.6, 0.45, 0.55)
    gt = make_box(l=4.0, w=2.0)
    # x-shifts of a 4m box give IoU (4-dx)/(4+dx); invert for targets
    def shifted(iou):
        dx = 4.0 * (1.0 - iou) / (1.0 + iou)
        return make_box(x=dx)

    cases = [
        (shifted(0.7), 1, True),
        (shifted(0.5), -1, False),   # between negative and positive, below reg
        (shifted(0.58), -1, True),   # ignored for cls, active for reg
        (shifted(0.3), 0, False),
    ]
    out = assign_proposals([b for b, _, _ in cases], [gt])
    for got, (_, cls_label, reg) in zip(out, cases):
        assert got.cls_label == cls_label
        assert got.reg_active == reg
        assert got.gt_index == 0


def test_assignment_without_ground_truth_is_negative():
    out = assign_proposals([make_box()], [])
    assert out == [Assignment(0, False, -1, 0.0)]


def test_assignment_picks_best_overlap():
    gts = [make_box(x=0.0), make_box(x=1.0)]
    out = assign_proposals([make_box(x=0.9)], gts)
    assert out[0].gt_index == 1


# -- average precision ---------------------------------------------------------------


def golden_ap_inputs():
    """Two ground truths; three detections: TP at 0.9, FP at 0.8, TP at 0.7.

    Precision envelope: 1.0 up to recall 1/2, then 2/3 up to recall 1.
    AP-40 = (20 * 1 + 20 * 2/3) / 40 = 5/6.
    """
    g1 = make_box(x=0.0)
    g2 = make_box(x=10.0)
    gts = [GroundTruth(g1, "Car"), GroundTruth(g2, "Car")]
    dets = [DetectionResult(g1, 0.9, "Car"),
            DetectionResult(make_box(x=5.0), 0.8, "Car"),
            DetectionResult(g2, 0.7, "Car")]
    return dets, gts


def test_ap40_golden_value_exact():
    dets, gts = golden_ap_inputs()
    res = average_precision_40(dets, gts, CLASS_IOU_THRESHOLD["Car"], "Car")
    assert abs(res.ap - 5.0 / 6.0) <= 1e-9
    assert not res.flagged
    assert (res.n_gt, res.n_det) == (2, 3)


def test_ap40_perfect_and_empty_cases():
    dets, gts = golden_ap_inputs()
    perfect = [d for d in dets if d.score != 0.8]
    assert average_precision_40(perfect, gts, 0.7, "Car").ap == pytest.approx(1.0)
    assert average_precision_40([], gts, 0.7, "Car").ap == 0.0
    flagged = average_precision_40(dets, [], 0.7, "Car")
    assert flagged.flagged and np.isnan(flagged.ap)


def test_ap40_each_gt_matched_once():
    g = make_box()
    gts = [GroundTruth(g, "Car")]
    dets = [DetectionResult(g, 0.9, "Car"), DetectionResult(g, 0.8, "Car")]
    res = average_precision_40(dets, gts, 0.7, "Car")
    # second detection of the same object is a false positive:
    # precision at full recall is 1.0 (reached at the first detection)
    assert res.ap == pytest.approx(1.0)
    # but a score flip makes the FP come first and halves the envelope
    dets_flipped = [DetectionResult(make_box(x=50.0), 0.95, "Car")] + dets
    res2 = average_precision_40(dets_flipped, gts, 0.7, "Car")
    assert res2.ap == pytest.approx(0.5)


def test_ap40_ignores_high_difficulty_ground_truth():
    g1, g2 = make_box(x=0.0), make_box(x=10.0)
    gts = [GroundTruth(g1, "Car", difficulty=0), GroundTruth(g2, "Car", difficulty=3)]
    dets = [DetectionResult(g1, 0.9, "Car"), DetectionResult(g2, 0.8, "Car")]
    res = average_precision_40(dets, gts, 0.7, "Car", max_difficulty=2)
    # the difficulty-3 object is an ignore region: its detection is
    # neither TP nor FP, and it does not add to n_gt
    assert res.n_gt == 1
    assert res.ap == pytest.approx(1.0)


def test_ap40_scene_separation():
    g = make_box()
    gts = [GroundTruth(g, "Car", scene=0)]
    dets = [DetectionResult(g, 0.9, "Car", scene=1)]  # right box, wrong scene
    assert average_precision_40(dets, gts, 0.7, "Car").ap == 0.0


def test_ap40_filters_other_classes():
    g = make_box()
    gts = [GroundTruth(g, "Car"), GroundTruth(make_box(x=10.0), "Pedestrian")]
    dets = [DetectionResult(g, 0.9, "Car")]
    res = average_precision_40(dets, gts, 0.7, "Car")
    assert res.n_gt == 1 and res.ap == pytest.approx(1.0)


# -- constants and I/O -----------------------------------------------------------


def test_class_table():
    assert CLASSES == ("Car", "Pedestrian", "Cyclist")
    assert set(DEFAULT_ANCHORS) == set(CLASSES)
    assert CLASS_IOU_THRESHOLD["Car"] == 0.7
    assert CLASS_IOU_THRESHOLD["Pedestrian"] == 0.5
    for l, w, h in DEFAULT_ANCHORS.values():
        assert l > 0 and w > 0 and h > 0


def test_detection_row_round_trip(tmp_path):
    dets = [DetectionResult(make_box(x=1.23456789, yaw=-0.5), 0.875, "Car"),
            DetectionResult(make_box(x=-3.0, l=0.8, w=0.6, h=1.7), 0.125, "Pedestrian")]
    path = str(tmp_path / "dets.txt")
    write_detections(path, dets)
    back = read_detections(path, scene=7)
    assert len(back) == 2
    for a, b in zip(back, dets):
        assert a.scene == 7
        assert a.klass == b.klass
        assert a.score == b.score
        assert np.allclose(a.box.as_array(), b.box.as_array(), atol=1e-7)
    row = format_detection_row(dets[0])
    assert row.split()[0] == "Car"
    with pytest.raises(BoxError):
        parse_detection_row("Car 0.5 1 2 3")
    with pytest.raises(BoxError):
        DetectionResult(make_box(), 1.5, "Car")
    with pytest.raises(BoxError):
        DetectionResult(make_box(), 0.5, "Tree")
