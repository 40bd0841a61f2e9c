"""Independent reference implementations used by the unit and acceptance tests."""

from __future__ import annotations

import itertools

import numpy as np

from adt.geometry import LabeledBoxes


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def ranked_detections(dets, cls):
    """(image, index, box) of class ``cls`` by descending score, ties by (image, index)."""
    rows = []
    for img, d in enumerate(dets):
        for j in range(len(d)):
            if d.classes[j] == cls:
                rows.append((-float(d.scores[j]), img, j, d.boxes[j]))
    rows.sort(key=lambda r: r[:3])
    return [(img, j, box) for _, img, j, box in rows]


def true_positives(prefix, gts, cls, thresh) -> int:
    """Greedy VOC matching of a ranked prefix, recomputed from scratch."""
    taken = set()
    tp = 0
    for img, _, box in prefix:
        best, best_iou = None, -1.0
        for k in range(len(gts[img])):
            if gts[img].classes[k] != cls or (img, k) in taken:
                continue
            v = box_iou(box, gts[img].boxes[k])
            if v > best_iou:
                best, best_iou = k, v
        if best is not None and best_iou >= thresh:
            taken.add((img, best))
            tp += 1
    return tp


def brute_force_ap(dets, gts, cls, thresh=0.5):
    """PR points for every rank cut, then the area under the upper envelope."""
    n_gt = sum(int(np.sum(g.classes == cls)) for g in gts)
    if n_gt == 0:
        return None
    ranked = ranked_detections(dets, cls)
    points = []
    for k in range(1, len(ranked) + 1):
        tp = true_positives(ranked[:k], gts, cls, thresh)
        points.append((tp / n_gt, tp / k))
    area = 0.0
    prev = 0.0
    for r in sorted({p[0] for p in points}):
        if r == prev:
            continue
        env = max(p for rr, p in points if rr >= r)
        area += (r - prev) * env
        prev = r
    return area


def ap_instances():
    """Every instance with <= 3 detections and <= 2 ground-truth boxes of class 0,
    over a fixed candidate vocabulary and all score orders (ties included)."""
    g1 = [0.0, 0.0, 10.0, 10.0]
    g2 = [20.0, 0.0, 30.0, 10.0]
    hit1 = [0.0, 0.0, 10.0, 11.0]
    dup1 = [1.0, 0.0, 11.0, 10.0]
    loose1 = [0.0, 0.0, 10.0, 20.0]  # IoU exactly 0.5 with g1
    mid = [5.0, 0.0, 25.0, 10.0]  # touches both gts, IoU 1/3 each
    hit2 = [20.0, 0.0, 30.0, 10.0]
    far = [50.0, 50.0, 60.0, 60.0]
    layouts = {
        "one_gt": ([[g1]], [[hit1, dup1, loose1, far, mid]]),
        "two_gt": ([[g1, g2]], [[hit1, dup1, hit2, far, mid]]),
        "two_images": ([[g1], [g2]], [[hit1, far, mid], [hit2, far]]),
        "no_gt": ([[]], [[far, hit1]]),
    }
    score_sets = [(0.9, 0.6, 0.3), (0.5, 0.5, 0.5), (0.7, 0.7, 0.2)]
    for name, (gt_layout, vocab) in layouts.items():
        gts = [LabeledBoxes(np.asarray(g, dtype=float).reshape(-1, 4), np.zeros(len(g), dtype=int)) for g in gt_layout]
        slots = [(img, b) for img, cands in enumerate(vocab) for b in range(len(cands))]
        for n in range(0, 4):
            for combo in itertools.combinations_with_replacement(range(len(slots)), n):
                for scores in set(itertools.permutations(score_sets[0][:n])) | {score_sets[1][:n], score_sets[2][:n]}:
                    per_img = [([], []) for _ in vocab]
                    for s, c in zip(scores, combo):
                        img, b = slots[c]
                        per_img[img][0].append(vocab[img][b])
                        per_img[img][1].append(s)
                    dets = [
                        LabeledBoxes(np.asarray(bx, dtype=float).reshape(-1, 4), np.zeros(len(bx), dtype=int), np.asarray(sc, dtype=float))
                        for bx, sc in per_img
                    ]
                    yield name, dets, gts
