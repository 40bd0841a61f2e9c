"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .geometry import GeometryError, LabeledBoxes


def check_images(images, name: str = "images", stride: int | None = None) -> np.ndarray:
    """Coerce to a float32 ``(N, H, W, 3)`` array with finite values in [0, 1]."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (N, H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite pixels")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} pixels must lie in [0, 1]")
    if stride is not None and (arr.shape[1] % stride or arr.shape[2] % stride):
        raise ValueError(f"{name} size {arr.shape[1]}x{arr.shape[2]} must be a multiple of {stride}")
    return arr


def check_labels(labels: Sequence, n_images: int, num_classes: int, name: str = "labels") -> list[LabeledBoxes]:
    """One LabeledBoxes per image, classes in ``[0, num_classes)``."""
    if isinstance(labels, LabeledBoxes):
        labels = [labels]
    labels = list(labels)
    if len(labels) != n_images:
        raise ValueError(f"{name} has {len(labels)} entries for {n_images} images")
    out = []
    for i, lb in enumerate(labels):
        if not isinstance(lb, LabeledBoxes):
            try:
                boxes, classes = lb
                lb = LabeledBoxes(boxes, classes)
            except (TypeError, ValueError, GeometryError) as exc:
                raise ValueError(f"{name}[{i}] must be LabeledBoxes or (boxes, classes)") from exc
        if len(lb) and (lb.classes.min() < 0 or lb.classes.max() >= num_classes):
            raise ValueError(f"{name}[{i}] has classes outside [0, {num_classes})")
        out.append(lb)
    return out


def check_probability(value: float, name: str) -> float:
    value = float(value)
    if not 0 <= value <= 1:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value
