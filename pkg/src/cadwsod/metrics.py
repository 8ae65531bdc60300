"""IoU, greedy NMS, VOC average precision and CorLoc.

Boxes are continuous ``(x1, y1, x2, y2)`` coordinates; areas carry no "+1"
pixel term.
"""

from __future__ import annotations

import warnings
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    def valid(self) -> bool:
        return self.x1 < self.x2 and self.y1 < self.y2

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


class Detection(NamedTuple):
    image_id: int
    class_id: int
    score: float
    box: Box


class GroundTruth(NamedTuple):
    image_id: int
    class_id: int
    box: Box


class NoGroundTruthWarning(UserWarning):
    """AP requested for a class without any ground truth; reported as 0."""


def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between box arrays of shape (M, 4) and (N, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.3) -> list[int]:
    """Indices kept by greedy NMS, highest score first (ties: lower index)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    ious = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_thresh
    return keep


def nms(dets: Sequence[Detection], iou_thresh: float = 0.3) -> list[Detection]:
    if not dets:
        return []
    boxes = np.array([d.box for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_thresh)]


def _ap_from_pr(recall: np.ndarray, precision: np.ndarray, mode: str) -> float:
    if mode == "voc07_11pt":
        tops = [precision[recall >= t].max(initial=0.0) for t in np.linspace(0.0, 1.0, 11)]
        return float(sum(tops) / 11.0)
    if mode == "area":
        mrec = np.concatenate(([0.0], recall, [1.0]))
        mpre = np.concatenate(([0.0], precision, [0.0]))
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        i = np.where(mrec[1:] != mrec[:-1])[0]
        return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))
    raise ValueError(f"unknown AP mode {mode!r}")


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_thresh: float = 0.5) -> np.ndarray:
    """True-positive flags for ``dets`` in descending score order.

    Each detection takes its highest-IoU ground truth in the same image (ties:
    first); it is a hit when that IoU exceeds the threshold and the ground
    truth is still unclaimed.
    """
    by_image = defaultdict(list)
    for g in gts:
        by_image[g.image_id].append(g.box)
    gt_boxes = {k: np.array(v) for k, v in by_image.items()}
    claimed = {k: np.zeros(len(v), dtype=bool) for k, v in gt_boxes.items()}
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        boxes = gt_boxes.get(d.image_id)
        if boxes is None:
            continue
        ov = pairwise_iou(np.array([d.box]), boxes)[0]
        j = int(np.argmax(ov))
        if ov[j] > iou_thresh and not claimed[d.image_id][j]:
            claimed[d.image_id][j] = True
            tp[rank] = True
    return tp


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                      iou_thresh: float = 0.5, mode: str = "voc07_11pt") -> float:
    """AP of one class's detections pooled over all images."""
    if not gts:
        warnings.warn("no ground truth for class; AP reported as 0", NoGroundTruthWarning)
        return 0.0
    tp = match_detections(dets, gts, iou_thresh)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(tp) + 1)
    return _ap_from_pr(recall, precision, mode)


def corloc(top_dets: Iterable[Detection], gts: Sequence[GroundTruth],
           iou_thresh: float = 0.5) -> float:
    """Fraction of images containing the class whose best detection hits a GT.

    Returns NaN when no image contains the class.
    """
    positives = defaultdict(list)
    for g in gts:
        positives[g.image_id].append(g.box)
    if not positives:
        return float("nan")
    best = {}
    for d in top_dets:
        if d.image_id in positives and (d.image_id not in best or d.score > best[d.image_id].score):
            best[d.image_id] = d
    hits = 0
    for img, boxes in positives.items():
        d = best.get(img)
        if d is not None and pairwise_iou(np.array([d.box]), np.array(boxes)).max() > iou_thresh:
            hits += 1
    return hits / len(positives)


@dataclass
class ClassMetrics:
    class_id: int
    ap: float
    corloc: float
    no_gt: bool


def evaluate_detections(dets: Sequence[Detection], top_dets: Sequence[Detection],
                        gts: Sequence[GroundTruth], num_classes: int,
                        ap_mode: str = "voc07_11pt") -> tuple[list[ClassMetrics], float, float]:
    """Per-class AP/CorLoc plus their means over classes that have ground truth."""
    rows = []
    for c in range(num_classes):
        cg = [g for g in gts if g.class_id == c]
        cd = [d for d in dets if d.class_id == c]
        ct = [d for d in top_dets if d.class_id == c]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NoGroundTruthWarning)
            ap = average_precision(cd, cg, 0.5, ap_mode)
        rows.append(ClassMetrics(c, ap, corloc(ct, cg), not cg))
    valid = [r for r in rows if not r.no_gt]
    mean_ap = float(np.mean([r.ap for r in valid])) if valid else 0.0
    mean_cl = float(np.mean([r.corloc for r in valid])) if valid else float("nan")
    return rows, mean_ap, mean_cl


def format_detection(d: Detection) -> str:
    b = d.box
    return f"{d.image_id} {d.class_id} {d.score:.17g} {b[0]:.17g} {b[1]:.17g} {b[2]:.17g} {b[3]:.17g}"


def parse_detection(line: str) -> Detection:
    parts = line.split()
    if len(parts) != 7:
        raise ValueError(f"detection line needs 7 fields, got {len(parts)}: {line!r}")
    img, cls = int(parts[0]), int(parts[1])
    score, *coords = map(float, parts[2:])
    return Detection(img, cls, score, Box(*coords))


def write_detections(path, dets: Iterable[Detection]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(format_detection(d) + "\n")


def read_detections(path) -> list[Detection]:
    with open(path) as fh:
        return [parse_detection(line) for line in fh if line.strip()]
