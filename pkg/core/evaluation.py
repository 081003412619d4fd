"""Single-class detection metrics: COCO-style AP, AP50 and recall.

Detections are matched greedily per image (highest score first, each to the
unmatched ground truth of highest IoU with IoU >= threshold). Precision and
recall are then accumulated over all images in the order
(score desc, image id, detection index), and AP is the 101-point interpolated
area under the monotone precision envelope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from common.errors import ValidationError

Box = Tuple[float, float, float, float]  # x, y, w, h (top-left origin)

COCO_IOU_THRESHOLDS = np.arange(10) * 0.05 + 0.5
RECALL_POINTS = np.arange(101) / 100.0
RECALL_CONF = 0.1
RECALL_IOU = 0.5


@dataclass(frozen=True)
class ScoredBox:
    bbox: Box
    score: float


@dataclass(frozen=True)
class ImageEval:
    """Detections and ground-truth boxes of one image."""

    image_id: int
    detections: Sequence[ScoredBox] = field(default_factory=tuple)
    ground_truth: Sequence[Box] = field(default_factory=tuple)


@dataclass(frozen=True)
class Metrics:
    ap: Optional[float]
    ap50: Optional[float]
    recall: Optional[float]
    num_images: int
    num_gt: int
    num_det: int


def iou(a: Box, b: Box) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    inter_w = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    inter_h = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = inter_w * inter_h
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def iou_matrix(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (m, 4) and (k, 4) xywh arrays."""
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(dets[:, None, 0], gts[None, :, 0])
    y1 = np.maximum(dets[:, None, 1], gts[None, :, 1])
    x2 = np.minimum(dets[:, None, 0] + dets[:, None, 2], gts[None, :, 0] + gts[None, :, 2])
    y2 = np.minimum(dets[:, None, 1] + dets[:, None, 3], gts[None, :, 1] + gts[None, :, 3])
    inter = np.clip(x2 - x1, 0.0, None) * np.clip(y2 - y1, 0.0, None)
    union = (dets[:, 2] * dets[:, 3])[:, None] + (gts[:, 2] * gts[:, 3])[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def match_detections(dets: Sequence[ScoredBox], gts: Sequence[Box], iou_thresh: float) -> np.ndarray:
    """True-positive flags for ``dets``, which must be sorted by non-increasing score."""
    scores = np.array([d.score for d in dets], dtype=np.float64)
    if scores.size > 1 and np.any(np.diff(scores) > 0):
        raise ValidationError("Detections must be sorted by non-increasing score.")

    flags = np.zeros(len(dets), dtype=bool)
    if not len(dets) or not len(gts):
        return flags

    overlaps = iou_matrix(np.array([d.bbox for d in dets]), np.array(gts))
    taken = np.zeros(len(gts), dtype=bool)
    for index, row in enumerate(overlaps):
        candidates = np.where(taken | (row < iou_thresh), -1.0, row)
        best = int(np.argmax(candidates))
        if candidates[best] >= 0:
            taken[best] = True
            flags[index] = True
    return flags


def _ranked(image: ImageEval) -> List[ScoredBox]:
    order = sorted(range(len(image.detections)), key=lambda i: (-image.detections[i].score, i))
    return [image.detections[i] for i in order]


def _pr_curve(images: Sequence[ImageEval], iou_thresh: float) -> Tuple[np.ndarray, np.ndarray, int]:
    scores: List[float] = []
    image_ids: List[int] = []
    det_index: List[int] = []
    flags: List[np.ndarray] = []
    for image in images:
        ranked = _ranked(image)
        flags.append(match_detections(ranked, image.ground_truth, iou_thresh))
        scores.extend(d.score for d in ranked)
        image_ids.extend([image.image_id] * len(ranked))
        det_index.extend(range(len(ranked)))

    num_gt = sum(len(image.ground_truth) for image in images)
    if not scores:
        return np.zeros(0), np.zeros(0), num_gt

    order = np.lexsort((np.array(det_index), np.array(image_ids), -np.array(scores)))
    tp = np.concatenate(flags)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / max(num_gt, 1)
    precision = tp_cum / (tp_cum + fp_cum)
    return recall, precision, num_gt


def average_precision(images: Sequence[ImageEval], iou_thresh: float) -> Optional[float]:
    """101-point interpolated AP at one IoU threshold; None when there is no ground truth."""
    recall, precision, num_gt = _pr_curve(images, iou_thresh)
    if num_gt == 0:
        return None
    if recall.size == 0:
        return 0.0

    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < envelope.size, envelope[np.minimum(idx, envelope.size - 1)], 0.0)
    return float(sampled.mean())


def ap_coco(images: Sequence[ImageEval]) -> Optional[float]:
    values = [average_precision(images, float(t)) for t in COCO_IOU_THRESHOLDS]
    if values[0] is None:
        return None
    return float(np.mean(values))


def recall_at(
    images: Sequence[ImageEval],
    conf_thresh: float = RECALL_CONF,
    iou_thresh: float = RECALL_IOU,
) -> Optional[float]:
    num_gt = sum(len(image.ground_truth) for image in images)
    if num_gt == 0:
        return None

    matched = 0
    for image in images:
        kept = [d for d in _ranked(image) if d.score >= conf_thresh]
        matched += int(match_detections(kept, image.ground_truth, iou_thresh).sum())
    return matched / num_gt


def evaluate_images(images: Iterable[ImageEval]) -> Metrics:
    images = list(images)
    return Metrics(
        ap=ap_coco(images),
        ap50=average_precision(images, 0.5),
        recall=recall_at(images),
        num_images=len(images),
        num_gt=sum(len(image.ground_truth) for image in images),
        num_det=sum(len(image.detections) for image in images),
    )
