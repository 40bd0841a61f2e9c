"""Weak (flip) and strong (appearance) augmentation with exact replay.

Each call samples its parameters up front into an :class:`AugmentRecord` and
then applies them, so ``replay`` reproduces an augmentation bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import LabeledBoxes

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class StrongAugmentConfig:
    p_jitter: float = 0.8
    p_grayscale: float = 0.2
    p_blur: float = 0.5
    p_cutout: float = 0.7
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    max_patches: int = 3
    patch_fraction: float = 0.25


@dataclass
class AugmentRecord:
    kind: str
    shape: tuple[int, ...]
    ops: list[dict] = field(default_factory=list)

    @property
    def fired(self) -> list[str]:
        return [op["op"] for op in self.ops]


class AugmentError(ValueError):
    pass


def hflip_boxes(labels: LabeledBoxes, width: float) -> LabeledBoxes:
    b = labels.boxes
    flipped = np.stack([width - b[:, 2], b[:, 1], width - b[:, 0], b[:, 3]], axis=1)
    return LabeledBoxes(flipped, labels.classes.copy(), None if labels.scores is None else labels.scores.copy())


def weak_augment(img: np.ndarray, labels: LabeledBoxes | None, rng: np.random.Generator, p_flip: float = 0.5):
    """Random horizontal flip of the image and its boxes."""
    record = AugmentRecord("weak", tuple(img.shape))
    if rng.uniform() < p_flip:
        record.ops.append({"op": "hflip"})
    out_img, out_labels = replay(img, labels, record)
    return out_img, out_labels, record


def sample_strong(shape, rng: np.random.Generator, cfg: StrongAugmentConfig = StrongAugmentConfig(), fill=0.5) -> AugmentRecord:
    h, w = shape[:2]
    record = AugmentRecord("strong", tuple(shape))
    if rng.uniform() < cfg.p_jitter:
        record.ops.append(
            {
                "op": "jitter",
                "brightness": float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)),
                "contrast": float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)),
                "saturation": float(rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)),
            }
        )
    if rng.uniform() < cfg.p_grayscale:
        record.ops.append({"op": "grayscale"})
    if rng.uniform() < cfg.p_blur:
        record.ops.append({"op": "blur", "sigma": float(rng.uniform(*cfg.blur_sigma))})
    if rng.uniform() < cfg.p_cutout:
        limit = max(1, int(cfg.patch_fraction * min(h, w)))
        patches = []
        for _ in range(int(rng.integers(1, cfg.max_patches + 1))):
            ph = int(rng.integers(1, limit + 1))
            pw = int(rng.integers(1, limit + 1))
            y0 = int(rng.integers(0, h - ph + 1))
            x0 = int(rng.integers(0, w - pw + 1))
            patches.append([y0, x0, ph, pw])
        record.ops.append({"op": "cutout", "patches": patches, "fill": np.broadcast_to(fill, (3,)).astype(float).tolist()})
    return record


def strong_augment(img: np.ndarray, rng: np.random.Generator, cfg: StrongAugmentConfig = StrongAugmentConfig(), fill=0.5):
    """Colour jitter, grayscale, Gaussian blur and cut-out, each with its own probability.

    Geometry is untouched, so labels pass through unchanged.
    """
    record = sample_strong(img.shape, rng, cfg, fill)
    out, _ = replay(img, None, record)
    return out, record


def grayscale(img: np.ndarray) -> np.ndarray:
    y = img.astype(np.float64) @ LUMA
    return np.repeat(y[..., None], 3, axis=-1)


def _jitter(x: np.ndarray, op: dict) -> np.ndarray:
    x = x * op["brightness"]
    mean = (x @ LUMA).mean()
    x = (x - mean) * op["contrast"] + mean
    gray = (x @ LUMA)[..., None]
    x = gray + (x - gray) * op["saturation"]
    return np.clip(x, 0, 1)


def replay(img: np.ndarray, labels: LabeledBoxes | None, record: AugmentRecord):
    """Apply a recorded augmentation. Returns ``(image, labels)``."""
    if tuple(img.shape) != tuple(record.shape):
        raise AugmentError(f"record was made for shape {record.shape}, got {img.shape}")
    dtype = img.dtype
    x = img.astype(np.float64)
    for op in record.ops:
        kind = op["op"]
        if kind == "hflip":
            x = x[:, ::-1]
            if labels is not None:
                labels = hflip_boxes(labels, img.shape[1])
        elif kind == "jitter":
            x = _jitter(x, op)
        elif kind == "grayscale":
            x = grayscale(x)
        elif kind == "blur":
            x = gaussian_filter(x, sigma=(op["sigma"], op["sigma"], 0), mode="reflect")
        elif kind == "cutout":
            fill = np.asarray(op["fill"])
            for y0, x0, ph, pw in op["patches"]:
                x[y0 : y0 + ph, x0 : x0 + pw] = fill
        else:
            raise AugmentError(f"unknown op {kind!r}")
    x = np.clip(x, 0, 1)
    return np.ascontiguousarray(x.astype(dtype)), labels
