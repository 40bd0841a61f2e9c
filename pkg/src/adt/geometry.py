"""Axis-aligned box algebra.

Boxes are ``(x_min, y_min, x_max, y_max)`` in continuous pixel coordinates.
Widths are ``x_max - x_min`` (no ``+1``), so scaling a box is a pure multiply.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Raised on degenerate or otherwise invalid box input."""


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim == 1:
        arr = arr.reshape(1, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise GeometryError(f"boxes must have shape (N, 4), got {arr.shape}")
    return arr


def check_boxes(boxes: np.ndarray) -> None:
    """Raise GeometryError unless every row is finite with positive extent."""
    if not np.all(np.isfinite(boxes)):
        raise GeometryError("box coordinates must be finite")
    bad = (boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise GeometryError(f"degenerate box at index {i}: {boxes[i].tolist()}")


@dataclass
class LabeledBoxes:
    """Boxes with class ids and optional confidence scores.

    ``boxes`` is ``(N, 4)`` float64, ``classes`` is ``(N,)`` int64 in
    ``[0, K)``; ``scores`` is ``(N,)`` float64 in ``[0, 1]`` or ``None``.
    """

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = as_boxes(self.boxes)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.classes) != len(self.boxes):
            raise GeometryError(
                f"{len(self.boxes)} boxes but {len(self.classes)} classes"
            )
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(self.scores) != len(self.boxes):
                raise GeometryError(
                    f"{len(self.boxes)} boxes but {len(self.scores)} scores"
                )

    def __len__(self) -> int:
        return len(self.boxes)

    def subset(self, index) -> "LabeledBoxes":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return LabeledBoxes(
            self.boxes[index].copy(),
            self.classes[index].copy(),
            None if self.scores is None else self.scores[index].copy(),
        )

    def copy(self) -> "LabeledBoxes":
        return self.subset(np.arange(len(self)))

    def without_scores(self) -> "LabeledBoxes":
        return LabeledBoxes(self.boxes.copy(), self.classes.copy(), None)

    def equals(self, other: "LabeledBoxes", atol: float = 0.0) -> bool:
        if len(self) != len(other):
            return False
        if (self.scores is None) != (other.scores is None):
            return False
        ok = np.allclose(self.boxes, other.boxes, rtol=0, atol=atol) and np.array_equal(
            self.classes, other.classes
        )
        if ok and self.scores is not None:
            ok = np.allclose(self.scores, other.scores, rtol=0, atol=atol)
        return bool(ok)

    @classmethod
    def empty(cls, with_scores: bool = False) -> "LabeledBoxes":
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0) if with_scores else None)


def box_area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays.

    No validity check; zero-area pairs give 0.
    """
    a = as_boxes(a)
    b = as_boxes(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iou(a, b) -> float:
    """IoU of two single boxes. Raises GeometryError on zero-area input."""
    a = as_boxes(a)
    b = as_boxes(b)
    if len(a) != 1 or len(b) != 1:
        raise GeometryError("iou expects exactly one box per argument")
    check_boxes(a)
    check_boxes(b)
    ix = max(0.0, min(a[0, 2], b[0, 2]) - max(a[0, 0], b[0, 0]))
    iy = max(0.0, min(a[0, 3], b[0, 3]) - max(a[0, 1], b[0, 1]))
    inter = ix * iy
    area_a = (a[0, 2] - a[0, 0]) * (a[0, 3] - a[0, 1])
    area_b = (b[0, 2] - b[0, 0]) * (b[0, 3] - b[0, 1])
    # Summed in a fixed order so iou(a, b) == iou(b, a) bit-for-bit.
    union = (max(area_a, area_b) + min(area_a, area_b)) - inter
    return float(inter / union)


def scale_boxes(labels: LabeledBoxes, factor: float) -> LabeledBoxes:
    if not factor > 0:
        raise GeometryError(f"scale factor must be positive, got {factor}")
    return LabeledBoxes(
        labels.boxes * float(factor),
        labels.classes.copy(),
        None if labels.scores is None else labels.scores.copy(),
    )


def filter_min_size(labels: LabeledBoxes, min_side: float) -> LabeledBoxes:
    """Keep boxes whose shorter side is at least ``min_side``, in order."""
    b = labels.boxes
    sides = np.minimum(b[:, 2] - b[:, 0], b[:, 3] - b[:, 1])
    return labels.subset(sides >= min_side)


def clip_boxes(labels: LabeledBoxes, width: float, height: float) -> LabeledBoxes:
    b = labels.boxes.copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, height)
    return LabeledBoxes(b, labels.classes.copy(), None if labels.scores is None else labels.scores.copy())


def nms_indices(boxes, scores, iou_thresh: float, max_keep: int | None = None) -> np.ndarray:
    """Class-agnostic greedy NMS; returns kept indices in descending score order.

    Ties in score are broken by original index so the result is deterministic.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    ious = iou_matrix(boxes[order], boxes[order])
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        if max_keep is not None and len(keep) >= max_keep:
            break
        suppressed |= ious[i] >= iou_thresh
    return np.asarray(keep, dtype=np.int64)


def nms(labels: LabeledBoxes, iou_thresh: float) -> LabeledBoxes:
    """Per-class greedy NMS. Output is sorted by descending score."""
    if labels.scores is None:
        raise GeometryError("nms requires scores")
    if not 0.0 <= iou_thresh <= 1.0:
        raise GeometryError(f"iou_thresh must lie in [0, 1], got {iou_thresh}")
    if len(labels) == 0:
        return labels.copy()
    keep = []
    for k in np.unique(labels.classes):
        idx = np.flatnonzero(labels.classes == k)
        keep.extend(idx[nms_indices(labels.boxes[idx], labels.scores[idx], iou_thresh)])
    keep = np.asarray(keep, dtype=np.int64)
    keep = keep[np.lexsort((keep, -labels.scores[keep]))]
    return labels.subset(keep)
