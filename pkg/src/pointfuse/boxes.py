"""Oriented 3D boxes, rotated-overlap IoU, NMS, proposal assignment and
40-point average precision.

Boxes live in the LiDAR frame: center (x, y, z), dimensions (l, w, h)
with l along the heading, and yaw about +z measured from +x, normalised
to (-pi, pi].  BEV geometry is exact convex polygon clipping, not an
axis-aligned approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BoxError(ValueError):
    """Degenerate or malformed box."""


CLASSES = ("Car", "Pedestrian", "Cyclist")

# class -> (l, w, h) mean anchor dimensions used for residual decoding
DEFAULT_ANCHORS = {
    "Car": (3.9, 1.6, 1.56),
    "Pedestrian": (0.8, 0.6, 1.73),
    "Cyclist": (1.76, 0.6, 1.73),
}

# class -> matching IoU threshold for AP
CLASS_IOU_THRESHOLD = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}

N_RECALL_POSITIONS = 40


def normalize_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = float(a) % (2.0 * np.pi)
    if a > np.pi:
        a -= 2.0 * np.pi
    return a


@dataclass
class Box3D:
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        for name in ("l", "w", "h"):
            if not getattr(self, name) > 0.0:
                raise BoxError(f"{name} must be positive, got {getattr(self, name)}")
        vals = [self.x, self.y, self.z, self.l, self.w, self.h, self.yaw]
        if not np.all(np.isfinite(vals)):
            raise BoxError("non-finite box field")
        self.yaw = normalize_angle(self.yaw)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.yaw])

    def bev_corners(self) -> np.ndarray:
        """[4, 2] corner polygon in the x-y plane, counter-clockwise."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        local = np.array([[self.l / 2, self.w / 2], [-self.l / 2, self.w / 2],
                          [-self.l / 2, -self.w / 2], [self.l / 2, -self.w / 2]])
        return local @ rot.T + np.array([self.x, self.y])

    def corners(self) -> np.ndarray:
        """[8, 3] box corners: bottom face then top face."""
        bev = self.bev_corners()
        lo, hi = self.z - self.h / 2, self.z + self.h / 2
        bottom = np.hstack([bev, np.full((4, 1), lo)])
        top = np.hstack([bev, np.full((4, 1), hi)])
        return np.vstack([bottom, top])

    def contains(self, pts: np.ndarray, inflate: float = 1.0) -> np.ndarray:
        """Boolean mask of points inside the (optionally inflated) box."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        d = pts - self.center
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        local_x = d[:, 0] * c + d[:, 1] * s
        local_y = -d[:, 0] * s + d[:, 1] * c
        eps = 1e-9
        return ((np.abs(local_x) <= self.l / 2 * inflate + eps)
                & (np.abs(local_y) <= self.w / 2 * inflate + eps)
                & (np.abs(d[:, 2]) <= self.h / 2 * inflate + eps))


def box_from_array(a) -> Box3D:
    a = np.asarray(a, dtype=np.float64).reshape(7)
    return Box3D(*a.tolist())


@dataclass
class DetectionResult:
    box: Box3D
    score: float
    klass: str
    scene: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise BoxError(f"score must be in [0,1], got {self.score}")
        if self.klass not in CLASSES:
            raise BoxError(f"unknown class {self.klass!r}")


@dataclass
class GroundTruth:
    box: Box3D
    klass: str
    difficulty: int = 0  # 0 easy / 1 moderate / 2 hard / 3 beyond-hard
    scene: int = 0


# -- convex polygon clipping -----------------------------------------------------


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon, sign-free."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman intersection of two convex polygons.

    ``clip`` must be counter-clockwise; returns the (possibly empty)
    intersection polygon.
    """
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        inp, out = out, []
        prev = inp[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0.0
        for cur in inp:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0.0
            if cur_in != prev_in:
                # segment crosses the edge line; append the intersection
                d = cur - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                out.append(prev + t * d)
            if cur_in:
                out.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(out) if out else np.zeros((0, 2))


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Rotated-rectangle IoU in the x-y plane."""
    pa, pb = a.bev_corners(), b.bev_corners()
    inter = polygon_area(clip_convex(pa, pb))
    area_a, area_b = a.l * a.w, b.l * b.w
    union = area_a + area_b - inter
    if union <= 0.0:
        raise BoxError("degenerate union in iou_bev")
    return float(np.clip(inter / union, 0.0, 1.0))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: BEV intersection times vertical overlap."""
    pa, pb = a.bev_corners(), b.bev_corners()
    inter_bev = polygon_area(clip_convex(pa, pb))
    z_lo = max(a.z - a.h / 2, b.z - b.h / 2)
    z_hi = min(a.z + a.h / 2, b.z + b.h / 2)
    inter = inter_bev * max(0.0, z_hi - z_lo)
    union = a.volume + b.volume - inter
    if union <= 0.0:
        raise BoxError("degenerate union in iou_3d")
    return float(np.clip(inter / union, 0.0, 1.0))


# -- NMS -------------------------------------------------------------------------


def nms(dets: list[DetectionResult], iou_threshold: float, overlap: str = "bev") -> list[int]:
    """Greedy non-maximum suppression; returns kept indices.

    Candidates are visited by descending score, equal scores by smaller
    original index; a candidate is dropped when its overlap with any
    already-kept box exceeds the threshold (strict >).
    """
    iou_fn = iou_bev if overlap == "bev" else iou_3d
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for i in order:
        if all(iou_fn(dets[i].box, dets[j].box) <= iou_threshold for j in kept):
            kept.append(int(i))
    return kept


# -- proposal-to-ground-truth assignment -----------------------------------------

CLS_POSITIVE_IOU = 0.6   # strictly above: classification positive
CLS_NEGATIVE_IOU = 0.45  # strictly below: classification negative
REG_ACTIVE_IOU = 0.55    # strictly above: regression supervised


@dataclass
class Assignment:
    cls_label: int        # 1 positive, 0 negative, -1 ignored
    reg_active: bool
    gt_index: int         # best-overlap ground truth, -1 if none
    iou: float


def assign_proposals(boxes: list[Box3D], gts: list[Box3D], overlap: str = "bev") -> list[Assignment]:
    """Label each proposal against its best-overlap ground truth.

    IoU > 0.6 is a classification positive, < 0.45 negative, in between
    ignored; IoU > 0.55 activates regression.  With no ground truth every
    proposal is negative.
    """
    iou_fn = iou_bev if overlap == "bev" else iou_3d
    out = []
    for box in boxes:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            v = iou_fn(box, gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_iou > CLS_POSITIVE_IOU:
            cls_label = 1
        elif best_iou < CLS_NEGATIVE_IOU:
            cls_label = 0
        else:
            cls_label = -1
        out.append(Assignment(cls_label, best_iou > REG_ACTIVE_IOU, best_j, best_iou))
    return out


# -- average precision -------------------------------------------------------------


@dataclass
class ApResult:
    ap: float          # NaN when flagged
    flagged: bool      # True when no ground truth existed
    n_gt: int = 0
    n_det: int = 0


def average_precision_40(dets: list[DetectionResult], gts: list[GroundTruth],
                         iou_threshold: float, klass: str,
                         overlap: str = "bev",
                         max_difficulty: int | None = None) -> ApResult:
    """AP sampled at recalls 1/40 .. 40/40 with right-max interpolation.

    Detections are matched greedily in score order (ties by input order)
    to the unmatched same-scene ground truth of the target class with the
    highest overlap at or above the threshold.  Ground truths above
    ``max_difficulty`` are ignore regions: they are not counted as
    positives and detections matching them are discarded outright.
    """
    iou_fn = iou_bev if overlap == "bev" else iou_3d
    gts = [g for g in gts if g.klass == klass]
    counted = [max_difficulty is None or g.difficulty <= max_difficulty for g in gts]
    n_pos = int(sum(counted))
    dets = [d for d in dets if d.klass == klass]
    if n_pos == 0:
        return ApResult(float("nan"), True, 0, len(dets))

    order = np.argsort(-np.array([d.score for d in dets]), kind="stable")
    matched = [False] * len(gts)
    tp_flags: list[int] = []  # 1 TP, 0 FP; ignored matches are skipped
    for i in order:
        det = dets[int(i)]
        best = {True: (0.0, -1), False: (0.0, -1)}  # counted -> (iou, idx)
        for j, gt in enumerate(gts):
            if matched[j] or gt.scene != det.scene:
                continue
            v = iou_fn(det.box, gt.box)
            if v >= iou_threshold and v > best[counted[j]][0]:
                best[counted[j]] = (v, j)
        best_j = best[True][1] if best[True][1] >= 0 else best[False][1]
        if best_j < 0:
            tp_flags.append(0)
            continue
        matched[best_j] = True
        if counted[best_j]:
            tp_flags.append(1)
        # matches to ignored ground truth count as neither TP nor FP

    tp = np.cumsum(tp_flags)
    fp = np.cumsum([1 - f for f in tp_flags])
    recall = tp / n_pos
    precision = tp / np.maximum(tp + fp, 1)

    ap = 0.0
    for k in range(1, N_RECALL_POSITIONS + 1):
        r = k / N_RECALL_POSITIONS
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ApResult(ap / N_RECALL_POSITIONS, False, n_pos, len(dets))


# -- detection dump format ----------------------------------------------------------
#
# One detection per text row:
#   class score x y z l w h yaw
# printed with %.9g, space separated.  Stable for golden-file tests.


def format_detection_row(det: DetectionResult) -> str:
    fields = [det.klass, f"{det.score:.9g}"] + [f"{v:.9g}" for v in det.box.as_array()]
    return " ".join(fields)


def parse_detection_row(line: str, scene: int = 0) -> DetectionResult:
    parts = line.split()
    if len(parts) != 9:
        raise BoxError(f"detection row needs 9 fields, got {len(parts)}: {line!r}")
    box = Box3D(*[float(v) for v in parts[2:9]])
    return DetectionResult(box, float(parts[1]), parts[0], scene)


def write_detections(path: str, dets: list[DetectionResult]) -> None:
    with open(path, "w") as fh:
        for det in dets:
            fh.write(format_detection_row(det) + "\n")


def read_detections(path: str, scene: int = 0) -> list[DetectionResult]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(parse_detection_row(line, scene))
    return out
