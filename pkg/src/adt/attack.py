"""FGSM / PGD against the student, driven by a foreground-only detection loss.

The attack treats teacher pseudo-labels as ground truth. Its loss keeps only
the anchors and ROIs matched to a pseudo-label, so the perturbation never
pushes the student on regions the teacher called background.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import detector as det
from .geometry import LabeledBoxes

ATTACK_TERMS = ("cls", "reg")


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 1.0 / 255
    epsilon: float = 4.0 / 255
    steps: int = 3
    p_attack: float = 1.0
    terms: tuple[str, ...] = ATTACK_TERMS

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 0 or int(self.steps) != self.steps:
            raise ValueError("steps must be a non-negative integer")
        if not 0 <= self.p_attack <= 1:
            raise ValueError("p_attack must lie in [0, 1]")
        bad = set(self.terms) - set(ATTACK_TERMS)
        if bad or not self.terms:
            raise ValueError(f"terms must be a non-empty subset of {ATTACK_TERMS}")


def attack_loss(out: det.DetectorOutputs, targets: Sequence[det.ImageTargets], terms=ATTACK_TERMS) -> torch.Tensor:
    """RPN + ROI loss summed only over positive anchors and foreground ROIs."""
    rpn_cls, rpn_reg = det.rpn_terms(out, targets, foreground_only=True)
    roi_cls, roi_reg = det.roi_terms(out, targets, foreground_only=True)
    total = out.rpn_logits.new_zeros(())
    if "cls" in terms:
        total = total + rpn_cls + roi_cls
    if "reg" in terms:
        total = total + rpn_reg + roi_reg
    return total


def _image_view(out: det.DetectorOutputs, b: int) -> det.DetectorOutputs:
    return det.DetectorOutputs(
        out.image_size,
        out.anchors,
        out.rpn_logits[b : b + 1],
        out.rpn_deltas[b : b + 1],
        out.rois[b : b + 1],
        out.roi_logits[b : b + 1],
        out.roi_deltas[b : b + 1],
    )


def per_image_attack_losses(out: det.DetectorOutputs, pseudo: Sequence[LabeledBoxes], terms=ATTACK_TERMS) -> list[torch.Tensor | None]:
    """Attack loss of each image in a batch; ``None`` where there are no pseudo-labels."""
    targets = det.assign_targets(out, pseudo)
    return [
        attack_loss(_image_view(out, b), [tg], terms) if len(pseudo[b]) else None
        for b, tg in enumerate(targets)
    ]


def attack_loss_value(student: det.ModelState, images, pseudo, terms=ATTACK_TERMS):
    """Attack loss at ``images`` without gradients (per image for a batch)."""
    images, pseudo, single = _batchify(images, pseudo)
    with torch.no_grad():
        out = det.forward(student, images, extra_rois=[p.boxes for p in pseudo])
        vals = np.array([0.0 if v is None else float(v) for v in per_image_attack_losses(out, pseudo, terms)])
    return vals[0] if single else vals


def attack_gradient(student: det.ModelState, images: np.ndarray, pseudo: Sequence[LabeledBoxes], terms=ATTACK_TERMS):
    """(per-image loss values, pixel gradient) of the attack objective for a batch.

    The batch objective is the sum of per-image losses, so every image's
    gradient is what it would be if attacked alone.
    """
    x = det.to_tensor(images).requires_grad_(True)
    out = det.forward(student, x, extra_rois=[p.boxes for p in pseudo])
    losses = per_image_attack_losses(out, pseudo, terms)
    values = np.array([0.0 if v is None else float(v.detach()) for v in losses])
    live = [v for v in losses if v is not None]
    if not live:
        return values, np.zeros(images.shape, dtype=np.float32)
    (g,) = torch.autograd.grad(torch.stack(live).sum(), x)
    g = g.permute(0, 2, 3, 1).numpy()
    if not np.all(np.isfinite(g)):
        raise det.DetectorError("non-finite attack gradient")
    return values, g


def fgsm_step(img: np.ndarray, grad: np.ndarray, alpha: float) -> np.ndarray:
    """``clip(img + alpha * sign(grad), 0, 1)`` with ``sign(0) = 0``."""
    img = np.asarray(img)
    grad = np.asarray(grad)
    if img.shape != grad.shape:
        raise ValueError(f"image shape {img.shape} != gradient shape {grad.shape}")
    out = img + np.asarray(alpha, dtype=img.dtype) * np.sign(grad).astype(img.dtype)
    return np.clip(out, 0, 1).astype(img.dtype)


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip into the L-inf ball of radius ``epsilon`` around ``x`` and into [0, 1]."""
    eps = np.asarray(epsilon, dtype=x.dtype)
    out = np.minimum(np.maximum(x_adv, x - eps), x + eps)
    return np.clip(out, 0, 1).astype(x.dtype)


def _batchify(images, pseudo):
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
        pseudo = [pseudo]
    return images, list(pseudo), single


def pgd(student: det.ModelState, images, pseudo, cfg: AttackConfig = AttackConfig()):
    """Projected gradient ascent on the attack loss.

    Accepts one HWC image with one LabeledBoxes, or a batch with a list.
    Returns ``(x_adv, trace)`` where ``trace[i]`` holds the per-image attack
    loss at iterate ``i`` (``cfg.steps`` entries). Images without
    pseudo-labels come back untouched.
    """
    images, pseudo, single = _batchify(images, pseudo)
    x0 = images.copy()
    x = images.copy()
    trace = []
    if all(len(p) == 0 for p in pseudo):
        return (x[0] if single else x), []
    for _ in range(cfg.steps):
        values, grad = attack_gradient(student, x, pseudo, cfg.terms)
        trace.append(values[0] if single else values)
        x = project(fgsm_step(x, grad, cfg.alpha), x0, cfg.epsilon)
    return (x[0] if single else x), trace


def should_attack(rng: np.random.Generator, p_attack: float) -> bool:
    if not 0 <= p_attack <= 1:
        raise ValueError("p_attack must lie in [0, 1]")
    return bool(rng.uniform() < p_attack)
