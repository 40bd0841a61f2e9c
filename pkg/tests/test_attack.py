import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adt import detector as det
from adt.attack import (
    AttackConfig,
    attack_gradient,
    attack_loss,
    attack_loss_value,
    fgsm_step,
    pgd,
    project,
    should_attack,
)
from adt.geometry import LabeledBoxes


@pytest.fixture(scope="module")
def student(tiny_arch):
    return det.init_state(tiny_arch, seed=5)


def test_fgsm_examples():
    x = np.array([0.5, 0.5, 0.999, 0.0], dtype=np.float32)
    g = np.array([2.0, -0.1, 1.0, 0.0], dtype=np.float32)
    out = fgsm_step(x, g, 0.01)
    np.testing.assert_allclose(out, [0.51, 0.49, 1.0, 0.0], atol=1e-7)
    assert np.array_equal(fgsm_step(x, np.zeros_like(g), 0.3), x)
    with pytest.raises(ValueError):
        fgsm_step(x, g[:2], 0.1)


def test_project_examples():
    x = np.array([0.5, 0.01, 0.5], dtype=np.float32)
    adv = np.array([0.6, -0.5, 0.49], dtype=np.float32)
    np.testing.assert_allclose(project(adv, x, 0.05), [0.55, 0.0, 0.49], atol=1e-7)
    assert np.array_equal(project(adv, x, 0.0), x)


@given(
    st.lists(st.floats(0, 1), min_size=1, max_size=20),
    st.floats(-2, 2),
    st.floats(0, 0.2),
)
def test_project_ball_and_range(xs, shift, eps):
    x = np.asarray(xs, dtype=np.float32)
    out = project(x + np.float32(shift), x, eps)
    assert np.max(np.abs(out - x)) <= eps + 1e-6
    assert out.min() >= 0 and out.max() <= 1


def test_config_validation():
    for bad in (dict(alpha=0), dict(epsilon=-1), dict(steps=-1), dict(p_attack=2), dict(terms=("obj",)), dict(terms=())):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_should_attack_frequency():
    rng = np.random.default_rng(0)
    assert not any(should_attack(rng, 0.0) for _ in range(200))
    assert all(should_attack(rng, 1.0) for _ in range(200))
    frac = np.mean([should_attack(rng, 0.5) for _ in range(10_000)])
    assert abs(frac - 0.5) <= 0.02


def test_pgd_budget_on_every_iterate(student, toy_image, toy_labels):
    cfg = AttackConfig(alpha=2 / 255, epsilon=4 / 255, steps=5)
    x = toy_image.copy()
    x[0, 0] = 1.0
    x[1, 1] = 0.0
    for t in range(cfg.steps + 1):
        adv, trace = pgd(student, x, toy_labels, AttackConfig(alpha=cfg.alpha, epsilon=cfg.epsilon, steps=t))
        assert len(trace) == t
        assert np.max(np.abs(adv - x)) <= cfg.epsilon + 1e-6
        assert adv.min() >= 0 and adv.max() <= 1
    again, trace2 = pgd(student, x, toy_labels, cfg)
    adv, trace = pgd(student, x, toy_labels, cfg)
    assert np.array_equal(adv, again) and np.array_equal(trace, trace2)


def test_pgd_empty_pseudo_labels(student, toy_image):
    adv, trace = pgd(student, toy_image, LabeledBoxes.empty())
    assert np.array_equal(adv, toy_image) and trace == []


def test_pgd_zero_budget(student, toy_image, toy_labels):
    adv, trace = pgd(student, toy_image, toy_labels, AttackConfig(epsilon=0.0))
    assert np.array_equal(adv, toy_image) and len(trace) == 3


def test_batch_gradient_matches_single(student, toy_image, toy_labels):
    other = np.ascontiguousarray(toy_image[::-1])
    other_labels = LabeledBoxes([[2, 2, 12, 12]], [0])
    v, g = attack_gradient(student, np.stack([toy_image, other]), [toy_labels, other_labels])
    v0, g0 = attack_gradient(student, toy_image[None], [toy_labels])
    v1, g1 = attack_gradient(student, other[None], [other_labels])
    np.testing.assert_allclose(v, [v0[0], v1[0]], rtol=1e-5)
    np.testing.assert_allclose(g[0], g0[0], rtol=1e-4, atol=1e-7)
    np.testing.assert_allclose(g[1], g1[0], rtol=1e-4, atol=1e-7)


def _frozen(student, image, labels):
    proposals = det.forward(student, image).rois[0]
    return dict(extra_rois=[labels.boxes], proposals=[proposals])


def test_attack_input_gradient_finite_difference(student, toy_image, toy_labels):
    img = toy_image.astype(np.float64)
    kw = _frozen(student, toy_image, toy_labels)

    def loss_fn(out):
        return attack_loss(out, det.assign_targets(out, [toy_labels]))

    g = det.input_gradient(student, img, loss_fn, dtype=torch.float64, **kw)

    def value(x):
        with torch.no_grad():
            return float(loss_fn(det.forward(student, x, dtype=torch.float64, **kw)))

    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(20):
        y, x, c = rng.integers(32), rng.integers(32), rng.integers(3)
        e = np.zeros_like(img)
        e[y, x, c] = h
        fd = (value(img + e) - value(img - e)) / (2 * h)
        assert g[y, x, c] == pytest.approx(fd, rel=1e-3, abs=1e-9)


def test_background_entries_do_not_matter(student, toy_image, toy_labels):
    out = det.forward(student, toy_image, extra_rois=[toy_labels.boxes])
    targets = det.assign_targets(out, [toy_labels])
    base = attack_loss(out, targets)
    tg = targets[0]
    # scramble every non-positive anchor and delete every background ROI
    rpn_bg = torch.from_numpy(tg.rpn.labels != 1)
    noisy_logits = torch.where(rpn_bg, torch.randn_like(out.rpn_logits[0]) * 50, out.rpn_logits[0])[None]
    noisy_deltas = torch.where(rpn_bg[:, None], torch.randn_like(out.rpn_deltas[0]) * 50, out.rpn_deltas[0])[None]
    fg = np.flatnonzero(tg.roi.classes >= 1)
    assert 0 < len(fg) < len(out.rois[0])
    pruned = det.DetectorOutputs(
        out.image_size, out.anchors, noisy_logits, noisy_deltas,
        [out.rois[0][fg]], [out.roi_logits[0][fg]], [out.roi_deltas[0][fg]],
    )
    pruned_targets = [det.ImageTargets(tg.rpn, tg.roi.subset(fg))]
    assert torch.equal(attack_loss(pruned, pruned_targets), base)


def test_term_selection(student, toy_image, toy_labels):
    cls = attack_loss_value(student, toy_image, toy_labels, ("cls",))
    reg = attack_loss_value(student, toy_image, toy_labels, ("reg",))
    both = attack_loss_value(student, toy_image, toy_labels)
    assert cls > 0 and reg > 0
    assert both == pytest.approx(cls + reg, rel=1e-6)


def test_fgsm_first_order_ascent(student):
    # statistical property: tiny signed steps rarely decrease the loss
    rng = np.random.default_rng(2)
    ok = 0
    trials = 30
    for _ in range(trials):
        img = rng.uniform(0.1, 0.9, (32, 32, 3)).astype(np.float32)
        x0, y0 = rng.uniform(0, 14, 2)
        lb = LabeledBoxes([[x0, y0, x0 + rng.uniform(8, 18), y0 + rng.uniform(8, 18)]], [int(rng.integers(5))])
        v, g = attack_gradient(student, img[None], [lb])
        stepped = fgsm_step(img.astype(np.float64), g[0].astype(np.float64), 1e-4).astype(np.float32)
        after = attack_loss_value(student, stepped, lb)
        ok += after >= v[0] - 1e-6
    assert ok >= 0.9 * trials
