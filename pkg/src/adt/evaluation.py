"""VOC-style detection metrics and pseudo-label diagnostics.

AP is the area under the all-points interpolated precision/recall curve.
Classes with no ground truth anywhere are left out of every mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import LabeledBoxes, iou_matrix

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class MatchResult:
    """Greedy matching of one class's detections, in descending score order."""

    scores: np.ndarray
    tp: np.ndarray
    matched_gt: list[tuple[int, int] | None]
    num_gt: int


def match_detections(dets: Sequence[LabeledBoxes], gts: Sequence[LabeledBoxes], cls: int, iou_thresh: float) -> MatchResult:
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection lists for {len(gts)} images")
    entries = []
    for img, d in enumerate(dets):
        if d.scores is None:
            raise ValueError("detections need scores")
        for j in np.flatnonzero(d.classes == cls):
            entries.append((-float(d.scores[j]), img, int(j)))
    entries.sort()
    gt_boxes = [g.boxes[g.classes == cls] for g in gts]
    used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    tp = np.zeros(len(entries), dtype=bool)
    matched: list[tuple[int, int] | None] = []
    for n, (_, img, j) in enumerate(entries):
        cand = gt_boxes[img]
        hit = None
        if len(cand):
            ious = iou_matrix(dets[img].boxes[j], cand)[0]
            ious[used[img]] = -1.0
            k = int(ious.argmax())
            if ious[k] >= iou_thresh:
                used[img][k] = True
                hit = (img, k)
        tp[n] = hit is not None
        matched.append(hit)
    scores = np.array([-e[0] for e in entries])
    return MatchResult(scores, tp, matched, int(sum(len(b) for b in gt_boxes)))


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-points interpolated AP from a score-ordered TP/FP sequence."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap_at_iou(dets, gts, cls: int, iou_thresh: float = 0.5) -> float | None:
    """AP of class ``cls``; ``None`` when the class has no ground truth."""
    m = match_detections(dets, gts, cls, iou_thresh)
    if m.num_gt == 0:
        return None
    return average_precision(m.tp, m.num_gt)


def per_class_ap(dets, gts, num_classes: int, iou_thresh: float) -> dict[int, float]:
    out = {}
    for k in range(num_classes):
        ap = ap_at_iou(dets, gts, k, iou_thresh)
        if ap is not None:
            out[k] = ap
    return out


def map_over(dets, gts, iou_threshs: Sequence[float], num_classes: int | None = None) -> float:
    """Mean AP over classes with ground truth and over ``iou_threshs``."""
    if num_classes is None:
        present = [int(c) for g in gts for c in g.classes] + [int(c) for d in dets for c in d.classes]
        num_classes = max(present) + 1 if present else 0
    values = []
    for t in iou_threshs:
        values.extend(per_class_ap(dets, gts, num_classes, t).values())
    if not values:
        raise ValueError("no class has ground truth; mAP undefined")
    return float(np.mean(values))


def pseudo_label_pr(pseudo: LabeledBoxes, gt: LabeledBoxes, iou_thresh: float = 0.5) -> tuple[float | None, float | None]:
    """(precision, recall) of pseudo-labels under greedy class-aware matching.

    Pseudo-labels are visited in descending score order when scores exist.
    Precision is ``None`` for no pseudo-labels, recall ``None`` for no gt.
    """
    tp = _pseudo_tp(pseudo, gt, iou_thresh)
    precision = tp / len(pseudo) if len(pseudo) else None
    recall = tp / len(gt) if len(gt) else None
    return precision, recall


def _pseudo_tp(pseudo: LabeledBoxes, gt: LabeledBoxes, iou_thresh: float) -> int:
    if len(pseudo) == 0 or len(gt) == 0:
        return 0
    order = np.arange(len(pseudo)) if pseudo.scores is None else np.lexsort((np.arange(len(pseudo)), -pseudo.scores))
    ious = iou_matrix(pseudo.boxes, gt.boxes)
    ious[pseudo.classes[:, None] != gt.classes[None, :]] = -1.0
    used = np.zeros(len(gt), dtype=bool)
    tp = 0
    for i in order:
        row = np.where(used, -1.0, ious[i])
        k = int(row.argmax())
        if row[k] >= iou_thresh:
            used[k] = True
            tp += 1
    return tp


def pooled_pseudo_label_pr(pseudo: Sequence[LabeledBoxes], gts: Sequence[LabeledBoxes], iou_thresh: float = 0.5):
    """Precision/recall pooled over many images (micro average)."""
    tp = sum(_pseudo_tp(p, g, iou_thresh) for p, g in zip(pseudo, gts))
    n_p = sum(len(p) for p in pseudo)
    n_g = sum(len(g) for g in gts)
    return (tp / n_p if n_p else None), (tp / n_g if n_g else None)


def evaluate(dets, gts, class_names: Sequence[str]) -> dict:
    """Report with stable keys: ``per_class_ap50``, ``mAP50``, ``mAP75``, ``mAP``."""
    k = len(class_names)
    ap50 = per_class_ap(dets, gts, k, 0.5)
    report = {
        "num_images": len(gts),
        "per_class_ap50": {class_names[c]: round(v * 100, 4) for c, v in ap50.items()},
        "mAP50": round(map_over(dets, gts, [0.5], k) * 100, 4),
        "mAP75": round(map_over(dets, gts, [0.75], k) * 100, 4),
        "mAP": round(map_over(dets, gts, COCO_THRESHOLDS, k) * 100, 4),
    }
    return report


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
