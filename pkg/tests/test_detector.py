import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adt import detector as det
from adt.geometry import LabeledBoxes


def test_anchor_grid_layout():
    arch = det.Architecture()
    a = det.anchor_grid(arch, 96, 96)
    assert a.shape == (12 * 12 * 3, 4)
    np.testing.assert_allclose(a[0], [4 - 6, 4 - 6, 4 + 6, 4 + 6])
    np.testing.assert_allclose(a[3], [12 - 6, 4 - 6, 12 + 6, 4 + 6])
    np.testing.assert_allclose(a[2], [4 - 22, 4 - 22, 4 + 22, 4 + 22])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(1, 50), min_size=4, max_size=4),
    st.lists(st.floats(1, 50), min_size=4, max_size=4),
)
def test_encode_decode_round_trip(r, g):
    ref = np.array([[r[0], r[1], r[0] + r[2], r[1] + r[3]]])
    gt = np.array([[g[0], g[1], g[0] + g[2], g[1] + g[3]]])
    for w in (det.RPN_BOX_WEIGHTS, det.ROI_BOX_WEIGHTS):
        back = det.decode_boxes(ref, det.encode_boxes(ref, gt, w), w)
        np.testing.assert_allclose(back, gt, atol=1e-9)


def test_match_thresholds():
    gt = LabeledBoxes([[0, 0, 10, 10]], [2])
    refs = np.array([[0, 0, 10, 10], [0, 0, 10, 20], [0, 0, 10, 40], [50, 50, 60, 60]])
    a = det.match(refs, gt, 0.7, 0.3, allow_low_quality=False)
    # IoUs: 1, 0.5, 0.25, 0
    assert a.labels.tolist() == [1, -1, 0, 0]
    assert a.classes.tolist() == [3, 0, 0, 0]
    b = det.match(refs[1:], gt, 0.7, 0.3, allow_low_quality=True)
    assert b.labels.tolist() == [1, 0, 0]
    empty = det.match(refs, LabeledBoxes.empty(), 0.7, 0.3)
    assert empty.labels.tolist() == [0, 0, 0, 0]
    with pytest.raises(ValueError):
        det.match(refs, gt, 0.3, 0.7)


def test_forward_shapes(tiny_arch, toy_image, toy_labels):
    state = det.init_state(tiny_arch, seed=0)
    out = det.forward(state, np.stack([toy_image, toy_image]), extra_rois=[toy_labels.boxes, np.zeros((0, 4))])
    n = (32 // 8) ** 2 * 3
    assert out.rpn_logits.shape == (2, n) and out.rpn_deltas.shape == (2, n, 4)
    assert len(out.rois[0]) == len(out.rois[1]) + 2
    assert out.q()[0].shape == (len(out.rois[0]), tiny_arch.num_classes + 1)
    torch.testing.assert_close(out.q()[0].sum(1), torch.ones(len(out.rois[0])))
    with pytest.raises(det.DetectorError):
        det.forward(state, toy_image[:30, :30])


def test_init_objectness_prior(tiny_arch):
    p = det.unflatten(tiny_arch, torch.from_numpy(det.init_state(tiny_arch).params))
    assert torch.sigmoid(p["rpn.obj.b"]).numpy() == pytest.approx(0.01, rel=1e-4)


def _frozen_loss(state, image, labels, proposals):
    def fn(flat):
        out = det.forward(state, image, extra_rois=[labels.boxes], proposals=[proposals], dtype=torch.float64, params=flat)
        tg = det.assign_targets(out, [labels])
        return det.loss_rpn(out, tg) + det.loss_roi(out, tg)
    return fn


def test_parameter_gradient_finite_difference(tiny_arch, toy_image, toy_labels):
    state = det.init_state(tiny_arch, seed=1)
    proposals = det.forward(state, toy_image).rois[0]
    fn = _frozen_loss(state, toy_image, toy_labels, proposals)
    flat = torch.from_numpy(state.params.astype(np.float64)).requires_grad_(True)
    (g,) = torch.autograd.grad(fn(flat), flat)
    rng = np.random.default_rng(0)
    idx = rng.choice(state.params.size, 25, replace=False)
    h = 1e-6
    for i in idx:
        e = torch.zeros_like(flat)
        e[i] = h
        with torch.no_grad():
            fd = (fn(flat + e) - fn(flat - e)) / (2 * h)
        assert float(g[i]) == pytest.approx(float(fd), rel=1e-4, abs=1e-7)


def test_input_gradient_finite_difference(tiny_arch, toy_image, toy_labels):
    state = det.init_state(tiny_arch, seed=2)
    proposals = det.forward(state, toy_image).rois[0]
    img = toy_image.astype(np.float64)

    def loss_fn(out):
        tg = det.assign_targets(out, [toy_labels])
        return det.loss_rpn(out, tg) + det.loss_roi(out, tg)

    kw = dict(extra_rois=[toy_labels.boxes], proposals=[proposals])
    g = det.input_gradient(state, img, loss_fn, dtype=torch.float64, **kw)
    assert g.shape == img.shape

    def value(x):
        with torch.no_grad():
            return float(loss_fn(det.forward(state, x, dtype=torch.float64, **kw)))

    h = 1e-6
    for y, x, c in [(5, 5, 0), (10, 12, 1), (20, 25, 2), (31, 0, 0)]:
        e = np.zeros_like(img)
        e[y, x, c] = h
        fd = (value(img + e) - value(img - e)) / (2 * h)
        assert g[y, x, c] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_loss_and_grad_reduces_loss(tiny_arch, toy_image, toy_labels):
    state = det.init_state(tiny_arch, seed=0)
    loss0, grad = det.loss_and_grad(state, toy_image, toy_labels)
    assert np.isfinite(loss0) and grad.shape == state.params.shape
    nxt = det.sgd_step(state, grad, 1e-3)
    with torch.no_grad():
        loss1 = float(det.supervised_loss(nxt, toy_image, toy_labels))
    assert loss1 < loss0


def test_momentum_recurrence(tiny_arch):
    state = det.init_state(tiny_arch)
    g = np.ones_like(state.params)
    v = np.zeros_like(state.params)
    s1, v = det.momentum_step(state, g, v, 0.1, 0.9)
    s2, v = det.momentum_step(s1, g, v, 0.1, 0.9)
    np.testing.assert_allclose(v, 1.9, rtol=1e-6)
    np.testing.assert_allclose(s2.params, state.params - 0.1 * (1 + 1.9), atol=1e-6)
    with pytest.raises(det.DetectorError):
        det.sgd_step(state, np.full_like(g, np.inf), 1.0)


def test_detect_outputs(tiny_arch, toy_image):
    state = det.init_state(tiny_arch)
    one = det.detect(state, toy_image, score_thresh=0.0)
    assert isinstance(one, LabeledBoxes) and one.scores is not None
    assert np.all(np.diff(one.scores) <= 0)
    assert np.all(one.boxes[:, 2:] <= 32)
    many = det.detect_many(state, [toy_image] * 3, batch_size=2, score_thresh=0.0)
    assert len(many) == 3 and many[2].equals(one, atol=1e-9)
    with pytest.raises(ValueError):
        det.detect(state, toy_image, score_thresh=1.5)


def test_checkpoint_round_trip(tiny_arch, tmp_path):
    state = det.init_state(tiny_arch, seed=4)
    det.save_checkpoint(tmp_path / "m", state, {"iteration": 3})
    back, meta = det.load_checkpoint(tmp_path / "m")
    assert back.arch == tiny_arch and np.array_equal(back.params, state.params)
    assert meta == {"iteration": 3}
    (tmp_path / "m.bin").write_bytes(b"\0" * 8)
    with pytest.raises(det.DetectorError):
        det.load_checkpoint(tmp_path / "m")


def test_model_state_rejects_bad_vectors(tiny_arch):
    with pytest.raises(det.DetectorError):
        det.ModelState(tiny_arch, np.zeros(3))
    bad = det.init_state(tiny_arch).params.copy()
    bad[0] = np.nan
    with pytest.raises(det.DetectorError):
        det.ModelState(tiny_arch, bad)
