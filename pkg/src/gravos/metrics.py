"""Rotated IoU, BEV non-maximum suppression and 40-point interpolated AP."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

from .geometry import intersection_area

N_RECALL_POINTS = 40
DEFAULT_THRESHOLDS = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}


class UndefinedAPError(ValueError):
    """AP has no meaning without ground truth; callers report it as absent."""


class Detection(NamedTuple):
    box: object
    class_id: str
    score: float


class PRPoint(NamedTuple):
    recall: float
    precision: float


@dataclass(frozen=True)
class MatchConfig:
    thresholds: dict = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    mode: str = "3D"

    def __post_init__(self):
        if self.mode not in ("3D", "BEV"):
            raise ValueError(f"mode must be 3D or BEV, got {self.mode!r}")
        for name, t in self.thresholds.items():
            if not 0.0 < t <= 1.0:
                raise ValueError(f"IoU threshold for {name} must lie in (0, 1]")

    def threshold(self, class_id):
        return self.thresholds[class_id]


def _far_apart(a, b):
    ra = 0.5 * math.hypot(a.length, a.width)
    rb = 0.5 * math.hypot(b.length, b.width)
    return math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb


def bev_intersection(a, b):
    if _far_apart(a, b):
        return 0.0
    return intersection_area(a.bev_corners(), b.bev_corners())


def iou_bev(a, b):
    inter = bev_intersection(a, b)
    if inter == 0.0:
        return 0.0
    union = a.length * a.width + b.length * b.width - inter
    return min(1.0, inter / union)


def iou_3d(a, b):
    dz = min(a.cz + 0.5 * a.height, b.cz + 0.5 * b.height) - max(a.cz - 0.5 * a.height, b.cz - 0.5 * b.height)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection(a, b) * dz
    if inter == 0.0:
        return 0.0
    return min(1.0, inter / (a.volume + b.volume - inter))


def box_iou(a, b, mode="3D"):
    return iou_3d(a, b) if mode == "3D" else iou_bev(a, b)


def nms_bev(boxes, scores, iou_threshold=0.5):
    """Greedy suppression; returns kept positions in score-descending order.

    Equal scores keep their input order.
    """
    order = sorted(range(len(boxes)), key=lambda i: -scores[i])
    suppressed = [False] * len(boxes)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if not suppressed[j] and iou_bev(boxes[i], boxes[j]) > iou_threshold:
                suppressed[j] = True
    return keep


def match_frames(frames, match, class_id=None):
    """Greedy one-to-one matching over (detections, gts) frames.

    Returns (rows, n_gt) with rows = [(score, is_tp)] in processing order.
    """
    entries = []
    n_gt = 0
    gts_per_frame = []
    for f, (dets, gts) in enumerate(frames):
        gts = [g for g in gts if class_id is None or g.class_id == class_id]
        gts_per_frame.append(gts)
        n_gt += len(gts)
        for pos, d in enumerate(dets):
            if class_id is None or d.class_id == class_id:
                entries.append((-d.score, f, pos, d))
    entries.sort(key=lambda e: e[:3])
    used = [[False] * len(g) for g in gts_per_frame]
    rows = []
    for _, f, _, det in entries:
        thr = match.threshold(det.class_id)
        best, best_iou = -1, -1.0
        for gi, gt in enumerate(gts_per_frame[f]):
            if used[f][gi] or gt.class_id != det.class_id:
                continue
            iou = box_iou(det.box, gt, match.mode)
            if iou >= thr and iou > best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            used[f][best] = True
        rows.append((det.score, best >= 0))
    return rows, n_gt


def pr_table(rows, n_gt):
    """Cumulative (score, tp, fp, recall, precision) after each detection."""
    table = []
    tp = fp = 0
    for score, hit in rows:
        tp += hit
        fp += not hit
        table.append((score, tp, fp, tp / n_gt, tp / (tp + fp)))
    return table


def ap_from_rows(rows, n_gt):
    if n_gt == 0:
        raise UndefinedAPError("no ground-truth objects")
    # best precision among operating points reaching each recall level,
    # compared in integers: tp / n_gt >= i / 40  <=>  40 * tp >= i * n_gt.
    # Precisions stay rational so the result is the correctly rounded AP.
    best = [Fraction(0)] * (N_RECALL_POINTS + 1)
    tp = fp = 0
    for _, hit in rows:
        tp += hit
        fp += not hit
        prec = Fraction(tp, tp + fp)
        level = min(N_RECALL_POINTS, (N_RECALL_POINTS * tp) // n_gt)
        if prec > best[level]:
            best[level] = prec
    total = running = Fraction(0)
    for i in range(N_RECALL_POINTS, 0, -1):
        running = max(running, best[i])
        total += running
    return float(total / N_RECALL_POINTS)


def average_precision(dets, gts, match, class_id=None):
    """AP|R40 for one frame of detections against its ground truth."""
    return average_precision_frames([(dets, gts)], match, class_id)


def average_precision_frames(frames, match, class_id=None):
    rows, n_gt = match_frames(frames, match, class_id)
    return ap_from_rows(rows, n_gt)


def map_over_classes(per_class):
    """Mean over classes whose AP is defined (None marks undefined)."""
    vals = [v for v in per_class.values() if v is not None]
    if not vals:
        raise UndefinedAPError("no class has a defined AP")
    return sum(vals) / len(vals)


def export_pr_curve(frames, match, class_id, path):
    rows, n_gt = match_frames(frames, match, class_id)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["score", "tp", "fp", "recall", "precision"])
        if n_gt:
            for row in pr_table(rows, n_gt):
                w.writerow(row)
