"""A small two-stage detector written as pure functions of a flat parameter vector.

The layout mirrors Faster R-CNN at toy scale: a strided conv backbone, an RPN
over a single-scale anchor grid, deterministic top-k proposals and an ROI head
fed by bilinear crop-resize pooling. Everything is differentiable with respect
to both the parameters and the input pixels; proposal selection is treated as
a non-differentiable index choice.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import LabeledBoxes, clip_boxes, iou_matrix, nms, nms_indices


class DetectorError(RuntimeError):
    """Shape mismatches, non-finite values and other detector failures."""


# Box coder weights (dx, dy, dw, dh) and smooth-L1 transition point.
RPN_BOX_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
ROI_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
SMOOTH_L1_BETA = 1.0 / 9.0
_MAX_DLOG = math.log(1000.0 / 16)


@dataclass(frozen=True)
class Architecture:
    num_classes: int = 5
    channels: tuple[int, ...] = (16, 32, 48, 48)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    anchor_sizes: tuple[float, ...] = (12.0, 24.0, 44.0)
    rpn_channels: int = 48
    roi_grid: int = 4
    roi_hidden: int = 128
    pre_nms_top_n: int = 200
    post_nms_top_n: int = 32
    proposal_nms: float = 0.7
    prior_prob: float = 0.01

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_sizes)

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        c_in = 3
        for i, c in enumerate(self.channels):
            shapes += [(f"conv{i}.w", (c, c_in, 3, 3)), (f"conv{i}.b", (c,))]
            c_in = c
        a, r, k = self.num_anchors, self.rpn_channels, self.num_classes
        shapes += [
            ("rpn.conv.w", (r, c_in, 3, 3)),
            ("rpn.conv.b", (r,)),
            ("rpn.obj.w", (a, r, 1, 1)),
            ("rpn.obj.b", (a,)),
            ("rpn.reg.w", (4 * a, r, 1, 1)),
            ("rpn.reg.b", (4 * a,)),
        ]
        flat = c_in * self.roi_grid * self.roi_grid
        shapes += [
            ("roi.fc.w", (self.roi_hidden, flat)),
            ("roi.fc.b", (self.roi_hidden,)),
            ("roi.cls.w", (k + 1, self.roi_hidden)),
            ("roi.cls.b", (k + 1,)),
            ("roi.reg.w", (4, self.roi_hidden)),
            ("roi.reg.b", (4,)),
        ]
        return shapes

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        for key in ("channels", "strides", "anchor_sizes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ModelState:
    """Architecture plus a flat float32 parameter vector."""

    arch: Architecture
    params: np.ndarray

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float32).reshape(-1)
        if self.params.size != self.arch.num_params:
            raise DetectorError(
                f"parameter vector has {self.params.size} entries, "
                f"architecture needs {self.arch.num_params}"
            )
        if not np.all(np.isfinite(self.params)):
            raise DetectorError("parameter vector contains non-finite values")

    def copy(self) -> "ModelState":
        return ModelState(self.arch, self.params.copy())


def init_state(arch: Architecture | None = None, seed: int = 0) -> ModelState:
    """He-style initialisation; heads start small, objectness biased toward background."""
    arch = arch or Architecture()
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in arch.param_shapes():
        if name.endswith(".b"):
            value = np.zeros(shape)
            if name == "rpn.obj.b":
                value[:] = -math.log((1 - arch.prior_prob) / arch.prior_prob)
        elif name.startswith(("rpn.obj", "rpn.reg", "roi.cls")):
            value = rng.normal(0.0, 0.01, shape)
        elif name.startswith("roi.reg"):
            value = rng.normal(0.0, 0.001, shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            value = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
        chunks.append(value.reshape(-1))
    return ModelState(arch, np.concatenate(chunks))


def unflatten(arch: Architecture, flat: torch.Tensor) -> dict[str, torch.Tensor]:
    out = {}
    offset = 0
    for name, shape in arch.param_shapes():
        n = int(np.prod(shape))
        out[name] = flat[offset : offset + n].view(shape)
        offset += n
    return out


# ---------------------------------------------------------------- anchors / boxes


def anchor_grid(arch: Architecture, height: int, width: int) -> np.ndarray:
    """Anchors ordered (row, col, shape) as ``(h*w*A, 4)`` corner boxes."""
    s = arch.stride
    h, w = height // s, width // s
    cy, cx = np.meshgrid((np.arange(h) + 0.5) * s, (np.arange(w) + 0.5) * s, indexing="ij")
    sizes = np.asarray(arch.anchor_sizes, dtype=np.float64)
    half = sizes[None, None, :] / 2
    boxes = np.stack(
        [cx[..., None] - half, cy[..., None] - half, cx[..., None] + half, cy[..., None] + half],
        axis=-1,
    )
    return boxes.reshape(-1, 4)


def encode_boxes(ref: np.ndarray, gt: np.ndarray, weights=RPN_BOX_WEIGHTS) -> np.ndarray:
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return np.stack(
        [wx * (gx - rx) / rw, wy * (gy - ry) / rh, ww * np.log(gw / rw), wh * np.log(gh / rh)],
        axis=1,
    )


def decode_boxes(ref, deltas, weights=RPN_BOX_WEIGHTS):
    """Inverse of :func:`encode_boxes`; works on numpy arrays or torch tensors."""
    lib = torch if isinstance(deltas, torch.Tensor) else np
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = lib.clip(deltas[:, 2] / ww, -_MAX_DLOG, _MAX_DLOG)
    dh = lib.clip(deltas[:, 3] / wh, -_MAX_DLOG, _MAX_DLOG)
    cx = rx + dx * rw
    cy = ry + dy * rh
    w = rw * lib.exp(dw)
    h = rh * lib.exp(dh)
    return lib.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], 1)


# ----------------------------------------------------------------------- forward


@dataclass
class DetectorOutputs:
    """Raw head outputs for a batch.

    ``p()`` and ``q()`` give the objectness probabilities ``(B, N)`` and the
    per-image class distributions ``(R_b, K+1)``.
    """

    image_size: tuple[int, int]
    anchors: np.ndarray
    rpn_logits: torch.Tensor
    rpn_deltas: torch.Tensor
    rois: list[np.ndarray]
    roi_logits: list[torch.Tensor]
    roi_deltas: list[torch.Tensor]

    def p(self) -> torch.Tensor:
        return torch.sigmoid(self.rpn_logits)

    def q(self) -> list[torch.Tensor]:
        return [torch.softmax(z, dim=1) for z in self.roi_logits]

    @property
    def batch_size(self) -> int:
        return self.rpn_logits.shape[0]


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """HWC image or list/array of HWC images -> ``(B, 3, H, W)`` tensor."""
    if isinstance(images, torch.Tensor):
        t = images
        if t.ndim == 3:
            t = t.unsqueeze(0)
        return t.to(dtype)
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise DetectorError(f"expected HxWx3 images, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def _backbone(p: dict, arch: Architecture, x: torch.Tensor) -> torch.Tensor:
    for i, s in enumerate(arch.strides):
        x = F.silu(F.conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=s, padding=1))
    return x


def _select_proposals(arch, anchors, logits, deltas, height, width) -> np.ndarray:
    scores = logits.detach().cpu().numpy().astype(np.float64)
    boxes = decode_boxes(anchors, deltas.detach().cpu().numpy().astype(np.float64))
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
    ok = np.flatnonzero(((boxes[:, 2] - boxes[:, 0]) >= 1.0) & ((boxes[:, 3] - boxes[:, 1]) >= 1.0))
    if len(ok) == 0:
        return np.zeros((0, 4))
    order = ok[np.lexsort((ok, -scores[ok]))][: arch.pre_nms_top_n]
    keep = nms_indices(boxes[order], scores[order], arch.proposal_nms, max_keep=arch.post_nms_top_n)
    return boxes[order[keep]]


def _roi_pool(arch: Architecture, feats: torch.Tensor, rois: list[np.ndarray]) -> torch.Tensor:
    """Bilinear crop-resize: 2x2 samples per bin, averaged, on a ``g x g`` grid."""
    g = arch.roi_grid
    n_samples = 2 * g
    _, _, fh, fw = feats.shape
    span_x = fw * arch.stride
    span_y = fh * arch.stride
    t = (torch.arange(n_samples, dtype=feats.dtype) + 0.5) / n_samples
    pooled = []
    for b, boxes in enumerate(rois):
        if len(boxes) == 0:
            continue
        bx = torch.as_tensor(boxes, dtype=feats.dtype)
        xs = bx[:, 0:1] + (bx[:, 2:3] - bx[:, 0:1]) * t[None]
        ys = bx[:, 1:2] + (bx[:, 3:4] - bx[:, 1:2]) * t[None]
        gx = (2 * xs / span_x - 1)[:, None, :].expand(-1, n_samples, -1)
        gy = (2 * ys / span_y - 1)[:, :, None].expand(-1, -1, n_samples)
        grid = torch.stack([gx, gy], dim=-1)
        src = feats[b : b + 1].expand(len(boxes), -1, -1, -1)
        sampled = F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        pooled.append(F.avg_pool2d(sampled, 2))
    if not pooled:
        return feats.new_zeros((0, feats.shape[1], g, g))
    return torch.cat(pooled, 0)


def forward(
    state: ModelState,
    images,
    extra_rois: Sequence[np.ndarray] | None = None,
    proposals: Sequence[np.ndarray] | None = None,
    dtype=torch.float32,
    params: torch.Tensor | None = None,
) -> DetectorOutputs:
    """Run the detector on a batch.

    Args:
        state: model state; ``params`` overrides its vector when given (used to
            differentiate with respect to the parameters).
        images: HWC array(s) or a ``(B, 3, H, W)`` tensor.
        extra_rois: per-image boxes appended to the proposals (ground truth
            during training, as in Faster R-CNN).
        proposals: per-image proposal boxes to use instead of the RPN's top-k.
            Freezes the proposal selection.
    """
    arch = state.arch
    x = to_tensor(images, dtype)
    _, c, height, width = x.shape
    s = arch.stride
    if c != 3 or height % s or width % s or height < s or width < s:
        raise DetectorError(f"image size {height}x{width} must be a positive multiple of stride {s}")
    flat = params if params is not None else torch.from_numpy(state.params).to(dtype)
    p = unflatten(arch, flat)
    feats = _backbone(p, arch, x)
    r = F.silu(F.conv2d(feats, p["rpn.conv.w"], p["rpn.conv.b"], padding=1))
    batch = x.shape[0]
    a = arch.num_anchors
    logits = F.conv2d(r, p["rpn.obj.w"], p["rpn.obj.b"]).permute(0, 2, 3, 1).reshape(batch, -1)
    deltas = (
        F.conv2d(r, p["rpn.reg.w"], p["rpn.reg.b"])
        .view(batch, a, 4, height // s, width // s)
        .permute(0, 3, 4, 1, 2)
        .reshape(batch, -1, 4)
    )
    anchors = anchor_grid(arch, height, width)
    rois = []
    for b in range(batch):
        if proposals is not None:
            boxes = np.asarray(proposals[b], dtype=np.float64).reshape(-1, 4)
        else:
            boxes = _select_proposals(arch, anchors, logits[b], deltas[b], height, width)
        if extra_rois is not None and len(extra_rois[b]):
            boxes = np.concatenate([boxes, np.asarray(extra_rois[b], dtype=np.float64)], 0)
        rois.append(boxes)
    pooled = _roi_pool(arch, feats, rois).flatten(1)
    hidden = F.silu(F.linear(pooled, p["roi.fc.w"], p["roi.fc.b"]))
    cls = F.linear(hidden, p["roi.cls.w"], p["roi.cls.b"])
    reg = F.linear(hidden, p["roi.reg.w"], p["roi.reg.b"])
    counts = [len(bx) for bx in rois]
    return DetectorOutputs(
        image_size=(height, width),
        anchors=anchors,
        rpn_logits=logits,
        rpn_deltas=deltas,
        rois=rois,
        roi_logits=list(torch.split(cls, counts)),
        roi_deltas=list(torch.split(reg, counts)),
    )


# ---------------------------------------------------------------------- matching


@dataclass
class Assignment:
    """Targets for one level (anchors or ROIs) of one image.

    ``labels``: 1 positive / 0 negative / -1 ignore. ``classes``: 0 for
    background, ``1..K`` for foreground (meaningful where ``labels == 1``).
    ``targets`` rows are valid only where ``labels == 1``.
    """

    labels: np.ndarray
    classes: np.ndarray
    targets: np.ndarray
    matched: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels == 1

    def subset(self, index) -> "Assignment":
        return Assignment(self.labels[index], self.classes[index], self.targets[index], self.matched[index])


def match(
    refs: np.ndarray,
    gt: LabeledBoxes,
    iou_pos: float,
    iou_neg: float,
    allow_low_quality: bool = True,
    weights=RPN_BOX_WEIGHTS,
) -> Assignment:
    """Label reference boxes against ground truth.

    Positive when IoU >= ``iou_pos`` (or, with ``allow_low_quality``, when the
    reference is a best match of some gt box), negative when IoU < ``iou_neg``,
    ignored in between.
    """
    if not 0.0 <= iou_neg <= iou_pos <= 1.0:
        raise ValueError(f"need 0 <= iou_neg <= iou_pos <= 1, got ({iou_neg}, {iou_pos})")
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, 4)
    n = len(refs)
    labels = np.zeros(n, dtype=np.int64)
    classes = np.zeros(n, dtype=np.int64)
    targets = np.zeros((n, 4))
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt) == 0 or n == 0:
        return Assignment(labels, classes, targets, matched)
    ious = iou_matrix(refs, gt.boxes)
    best = ious.argmax(1)
    best_iou = ious[np.arange(n), best]
    labels[(best_iou >= iou_neg) & (best_iou < iou_pos)] = -1
    labels[best_iou >= iou_pos] = 1
    if allow_low_quality:
        gt_best = ious.max(0)
        rows, cols = np.nonzero((ious == gt_best[None]) & (gt_best[None] > 0))
        labels[rows] = 1
        best[rows] = cols
    pos = labels == 1
    matched[pos] = best[pos]
    classes[pos] = gt.classes[best[pos]] + 1
    if pos.any():
        targets[pos] = encode_boxes(refs[pos], gt.boxes[best[pos]], weights)
    return Assignment(labels, classes, targets, matched)


RPN_IOU = (0.7, 0.3)
ROI_IOU = 0.5


@dataclass
class ImageTargets:
    rpn: Assignment
    roi: Assignment


def assign_targets(out: DetectorOutputs, gts: Sequence[LabeledBoxes]) -> list[ImageTargets]:
    targets = []
    for b, gt in enumerate(gts):
        rpn = match(out.anchors, gt, *RPN_IOU, allow_low_quality=True)
        roi = match(out.rois[b], gt, ROI_IOU, ROI_IOU, allow_low_quality=False, weights=ROI_BOX_WEIGHTS)
        targets.append(ImageTargets(rpn, roi))
    return targets


# ------------------------------------------------------------------------ losses


def smooth_l1(x: torch.Tensor, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def _masked_mean(values: list[torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    n = sum(v.shape[0] for v in values)
    if n == 0:
        return like.new_zeros(())
    return torch.cat(values).sum() / n


def rpn_terms(out: DetectorOutputs, targets: Sequence[ImageTargets], foreground_only: bool = False):
    """(classification, regression) RPN terms, each a mean over contributing anchors."""
    cls_terms, reg_terms = [], []
    for b, tg in enumerate(targets):
        lab = tg.rpn.labels
        keep = lab == 1 if foreground_only else lab >= 0
        idx = torch.from_numpy(np.flatnonzero(keep))
        if len(idx):
            z = out.rpn_logits[b, idx]
            y = torch.as_tensor(lab[keep], dtype=z.dtype)
            cls_terms.append(F.binary_cross_entropy_with_logits(z, y, reduction="none"))
        pos = np.flatnonzero(lab == 1)
        if len(pos):
            d = out.rpn_deltas[b, torch.from_numpy(pos)]
            t = torch.as_tensor(tg.rpn.targets[pos], dtype=d.dtype)
            reg_terms.append(smooth_l1(d - t).sum(1))
    like = out.rpn_logits
    return _masked_mean(cls_terms, like), _masked_mean(reg_terms, like)


def roi_terms(out: DetectorOutputs, targets: Sequence[ImageTargets], foreground_only: bool = False):
    """(classification, regression) ROI terms; regression only on foreground ROIs."""
    cls_terms, reg_terms = [], []
    for b, tg in enumerate(targets):
        cls = tg.roi.classes
        fg = np.flatnonzero(cls >= 1)
        rows = fg if foreground_only else np.arange(len(cls))
        if len(rows):
            z = out.roi_logits[b][torch.from_numpy(rows)]
            cls_terms.append(F.cross_entropy(z, torch.from_numpy(cls[rows]), reduction="none"))
        if len(fg):
            d = out.roi_deltas[b][torch.from_numpy(fg)]
            t = torch.as_tensor(tg.roi.targets[fg], dtype=d.dtype)
            reg_terms.append(smooth_l1(d - t).sum(1))
    like = out.rpn_logits
    return _masked_mean(cls_terms, like), _masked_mean(reg_terms, like)


def loss_rpn(out: DetectorOutputs, targets: Sequence[ImageTargets]) -> torch.Tensor:
    cls, reg = rpn_terms(out, targets)
    return cls + reg


def loss_roi(out: DetectorOutputs, targets: Sequence[ImageTargets]) -> torch.Tensor:
    cls, reg = roi_terms(out, targets)
    return cls + reg


def _as_list(labels) -> list[LabeledBoxes]:
    return [labels] if isinstance(labels, LabeledBoxes) else list(labels)


def supervised_loss(
    state: ModelState,
    images,
    labels,
    dtype=torch.float32,
    params: torch.Tensor | None = None,
) -> torch.Tensor:
    """RPN + ROI loss on labelled images, with ground truth added to the proposals."""
    labels = _as_list(labels)
    out = forward(state, images, extra_rois=[gt.boxes for gt in labels], dtype=dtype, params=params)
    targets = assign_targets(out, labels)
    return loss_rpn(out, targets) + loss_roi(out, targets)


def loss_and_grad(state: ModelState, images, labels) -> tuple[float, np.ndarray]:
    """Supervised loss and its gradient with respect to the flat parameters."""
    flat = torch.from_numpy(state.params.copy()).requires_grad_(True)
    loss = supervised_loss(state, images, labels, params=flat)
    (grad,) = torch.autograd.grad(loss, flat)
    return float(loss.detach()), grad.numpy().astype(np.float32)


def input_gradient(
    state: ModelState,
    image: np.ndarray,
    loss_fn: Callable[[DetectorOutputs], torch.Tensor],
    dtype=torch.float32,
    **forward_kwargs,
) -> np.ndarray:
    """Gradient of ``loss_fn(forward(state, image))`` with respect to the pixels (HWC)."""
    x = to_tensor(image, dtype).requires_grad_(True)
    out = forward(state, x, dtype=dtype, **forward_kwargs)
    loss = loss_fn(out)
    if not loss.requires_grad:
        return np.zeros_like(np.asarray(image, dtype=np.float64 if dtype == torch.float64 else np.float32))
    (g,) = torch.autograd.grad(loss, x, allow_unused=True)
    if g is None:
        g = torch.zeros_like(x)
    g = g[0].permute(1, 2, 0).detach().numpy()
    if not np.all(np.isfinite(g)):
        raise DetectorError("input gradient is not finite")
    return g


# --------------------------------------------------------------------- inference


def postprocess(
    out: DetectorOutputs, score_thresh: float, nms_thresh: float, max_dets: int = 100
) -> list[LabeledBoxes]:
    height, width = out.image_size
    results = []
    for b in range(out.batch_size):
        rois = out.rois[b]
        if len(rois) == 0:
            results.append(LabeledBoxes.empty(with_scores=True))
            continue
        prob = torch.softmax(out.roi_logits[b].detach().double(), 1).numpy()
        fg = prob[:, 1:]
        classes = fg.argmax(1)
        scores = fg[np.arange(len(fg)), classes]
        boxes = decode_boxes(rois, out.roi_deltas[b].detach().double().numpy(), ROI_BOX_WEIGHTS)
        dets = clip_boxes(LabeledBoxes(boxes, classes, scores), width, height)
        b_ = dets.boxes
        valid = (scores >= score_thresh) & (b_[:, 2] - b_[:, 0] > 0) & (b_[:, 3] - b_[:, 1] > 0)
        dets = nms(dets.subset(valid), nms_thresh)
        results.append(dets.subset(np.arange(min(len(dets), max_dets))))
    return results


@torch.no_grad()
def detect(state: ModelState, images, score_thresh: float = 0.05, nms_thresh: float = 0.5):
    """Decoded, clipped, class-wise NMS'd detections.

    Returns one LabeledBoxes for a single HWC image, else a list.
    """
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= nms_thresh <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    single = isinstance(images, np.ndarray) and images.ndim == 3
    out = forward(state, images)
    dets = postprocess(out, score_thresh, nms_thresh)
    return dets[0] if single else dets


def detect_many(state: ModelState, images: Sequence[np.ndarray], batch_size: int = 16, **kw) -> list[LabeledBoxes]:
    results = []
    for i in range(0, len(images), batch_size):
        results.extend(detect(state, np.stack(images[i : i + batch_size]), **kw))
    return results


# -------------------------------------------------------------------- optimizers


def sgd_step(state: ModelState, grad: np.ndarray, lr: float) -> ModelState:
    """Return a new state with ``params - lr * grad``."""
    grad = np.asarray(grad, dtype=np.float32).reshape(-1)
    if grad.shape != state.params.shape:
        raise DetectorError(f"gradient shape {grad.shape} != parameter shape {state.params.shape}")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    new = state.params - np.float32(lr) * grad
    if not np.all(np.isfinite(new)):
        raise DetectorError("non-finite parameter update")
    return ModelState(state.arch, new)


def momentum_step(
    state: ModelState, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float
) -> tuple[ModelState, np.ndarray]:
    """Heavy-ball SGD: ``v = momentum * v + grad``; ``params -= lr * v``."""
    v = np.float32(momentum) * velocity + np.asarray(grad, dtype=np.float32)
    return sgd_step(state, v, lr), v


# -------------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: ModelState, metadata: dict | None = None) -> None:
    """Write ``<path>.json`` (architecture + metadata) and ``<path>.bin`` (LE float32)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"architecture": state.arch.to_dict(), "num_params": int(state.params.size), "metadata": metadata or {}}
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    path.with_suffix(".bin").write_bytes(state.params.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelState, dict]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    arch = Architecture.from_dict(header["architecture"])
    params = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4").astype(np.float32)
    if params.size != header["num_params"]:
        raise DetectorError(f"{path}: expected {header['num_params']} parameters, found {params.size}")
    return ModelState(arch, params), header.get("metadata", {})
