import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adt.geometry import (
    GeometryError,
    LabeledBoxes,
    filter_min_size,
    iou,
    iou_matrix,
    nms,
    scale_boxes,
)


@st.composite
def boxes(draw, max_coord=200.0):
    x0 = draw(st.floats(0, max_coord - 1, allow_nan=False))
    y0 = draw(st.floats(0, max_coord - 1, allow_nan=False))
    w = draw(st.floats(0.5, 60, allow_nan=False))
    h = draw(st.floats(0.5, 60, allow_nan=False))
    return [x0, y0, x0 + w, y0 + h]


def test_iou_examples():
    assert iou([1, 2, 5, 9], [1, 2, 5, 9]) == 1.0
    assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert iou([0, 0, 10, 10], [5, 5, 15, 15]) == pytest.approx(25 / 175, abs=1e-12)


@pytest.mark.parametrize("bad", [[0, 0, 0, 5], [3, 3, 1, 5], [0, 0, np.inf, 1]])
def test_iou_rejects_degenerate(bad):
    with pytest.raises(GeometryError):
        iou(bad, [0, 0, 1, 1])


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(boxes())
def test_iou_self_is_one(a):
    assert iou(a, a) == 1.0


def test_scale_boxes_examples():
    lb = LabeledBoxes([[10, 10, 20, 20]], [2], [0.7])
    same = scale_boxes(lb, 1.0)
    assert same.equals(lb)
    assert np.array_equal(scale_boxes(lb, 0.5).boxes, [[5, 5, 10, 10]])
    out = scale_boxes(LabeledBoxes([[3, 4, 9, 14]], [0]), 1.5)
    np.testing.assert_allclose(out.boxes, [[4.5, 6, 13.5, 21]])
    assert out.classes.tolist() == [0]


@pytest.mark.parametrize("factor", [0.0, -1.0])
def test_scale_boxes_rejects_nonpositive(factor):
    with pytest.raises(GeometryError):
        scale_boxes(LabeledBoxes([[0, 0, 1, 1]], [0]), factor)


@given(st.lists(boxes(), min_size=1, max_size=6), st.floats(0.25, 4.0))
def test_scale_round_trip(bs, r):
    lb = LabeledBoxes(bs, [0] * len(bs))
    back = scale_boxes(scale_boxes(lb, r), 1.0 / r)
    np.testing.assert_allclose(back.boxes, lb.boxes, rtol=0, atol=1e-6)


def test_filter_min_size_examples():
    lb = LabeledBoxes([[0, 0, 8, 20], [0, 0, 16, 16], [0, 0, 4, 40]], [0, 1, 2], [0.1, 0.2, 0.3])
    assert filter_min_size(lb, 0).equals(lb)
    kept = filter_min_size(lb, 8)
    assert kept.classes.tolist() == [0, 1]
    assert kept.scores.tolist() == [0.1, 0.2]
    assert len(filter_min_size(LabeledBoxes.empty(), 8)) == 0


@given(st.lists(boxes(), max_size=8), st.floats(0, 40))
def test_filter_min_size_is_subsequence(bs, s):
    lb = LabeledBoxes(np.asarray(bs).reshape(-1, 4), np.arange(len(bs)))
    out = filter_min_size(lb, s)
    ids = out.classes.tolist()
    assert ids == sorted(ids)
    widths = np.minimum(out.boxes[:, 2] - out.boxes[:, 0], out.boxes[:, 3] - out.boxes[:, 1])
    assert np.all(widths >= s)


def test_nms_requires_scores():
    with pytest.raises(GeometryError):
        nms(LabeledBoxes([[0, 0, 1, 1]], [0]), 0.5)


def test_nms_single_and_duplicate():
    one = LabeledBoxes([[0, 0, 5, 5]], [1], [0.3])
    assert nms(one, 0.5).equals(one)
    dup = LabeledBoxes([[0, 0, 5, 5], [0, 0, 5, 5]], [1, 1], [0.8, 0.9])
    out = nms(dup, 0.5)
    assert len(out) == 1 and out.scores[0] == 0.9


def _greedy_reference(lb: LabeledBoxes, thresh: float) -> set[int]:
    """Quadratic greedy NMS written independently, one class at a time."""
    kept = set()
    for k in set(lb.classes.tolist()):
        idx = [i for i in range(len(lb)) if lb.classes[i] == k]
        idx.sort(key=lambda i: (-lb.scores[i], i))
        alive = list(idx)
        while alive:
            top = alive.pop(0)
            kept.add(top)
            alive = [j for j in alive if iou(lb.boxes[top], lb.boxes[j]) < thresh]
    return kept


def test_nms_matches_reference_mixed_classes():
    lb = LabeledBoxes(
        [[0, 0, 10, 10], [1, 1, 11, 11], [0, 0, 10, 10], [20, 20, 30, 30]],
        [0, 0, 1, 0],
        [0.9, 0.8, 0.7, 0.6],
    )
    out = nms(lb, 0.5)
    assert out.scores.tolist() == [0.9, 0.7, 0.6]
    expected = _greedy_reference(lb, 0.5)
    assert sorted(lb.scores[list(expected)].tolist(), reverse=True) == out.scores.tolist()


@settings(max_examples=60, deadline=None)
@given(st.lists(boxes(max_coord=40), min_size=1, max_size=10), st.floats(0.1, 0.9), st.randoms(use_true_random=False))
def test_nms_property(bs, thresh, rnd):
    n = len(bs)
    lb = LabeledBoxes(bs, [rnd.randrange(2) for _ in range(n)], [rnd.random() for _ in range(n)])
    out = nms(lb, thresh)
    for k in (0, 1):
        kb = out.boxes[out.classes == k]
        for a, b in itertools.combinations(range(len(kb)), 2):
            assert iou_matrix(kb[a], kb[b])[0, 0] < thresh
    assert len(out) == len(_greedy_reference(lb, thresh))
