"""Source burn-in followed by the adversarial-defense mean-teacher loop.

Each iteration draws from a generator seeded by ``(seed, phase, iteration)``,
so a resumed run replays exactly what an uninterrupted one would have done.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import detector as det
from .attack import AttackConfig, pgd, should_attack
from .augment import StrongAugmentConfig, strong_augment, weak_augment
from .evaluation import evaluate, pooled_pseudo_label_pr
from .geometry import LabeledBoxes, clip_boxes, filter_min_size, scale_boxes

logger = logging.getLogger(__name__)

_PHASE_BURN_IN = 0
_PHASE_ADAPT = 1


class TrainingError(RuntimeError):
    """Non-finite loss or parameters; carries the path of the rescue checkpoint."""

    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message if checkpoint is None else f"{message} (state saved to {checkpoint})")
        self.checkpoint = checkpoint


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    ema_decay: float = 0.9996
    score_threshold: float = 0.8
    source_weight: float = 1.0
    target_weight: float = 1.0
    lr: float = 0.02
    burn_in_lr: float | None = None
    momentum: float = 0.9
    grad_clip: float = 5.0
    warmup: int = 100
    zoom_in: tuple[float, float] = (1.2, 1.5)
    zoom_out: tuple[float, float] = (0.5, 0.8)
    min_side: float = 8.0
    max_iter: int = 1000
    burn_in: int = 2000
    batch_size: int = 8
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    detect_score_floor: float = 0.05
    nms_thresh: float = 0.5

    def __post_init__(self):
        if not 0 <= self.ema_decay <= 1:
            raise ConfigError("ema_decay must lie in [0, 1]")
        if not 0 <= self.score_threshold <= 1:
            raise ConfigError("score_threshold must lie in [0, 1]")
        if self.source_weight < 0 or self.target_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.burn_in_lr is not None and not self.burn_in_lr > 0:
            raise ConfigError("burn_in_lr must be positive")
        lo, hi = self.zoom_in
        if not 1 <= lo <= hi:
            raise ConfigError("zoom_in range must satisfy 1 <= low <= high")
        lo, hi = self.zoom_out
        if not 0 < lo <= hi <= 1:
            raise ConfigError("zoom_out range must satisfy 0 < low <= high <= 1")
        if self.min_side < 0:
            raise ConfigError("min_side must be non-negative")
        for name in ("max_iter", "burn_in", "batch_size", "eval_every", "checkpoint_every", "warmup"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.batch_size == 0:
            raise ConfigError("batch_size must be positive")

    @property
    def zoom_enabled(self) -> bool:
        return self.zoom_in != (1.0, 1.0) or self.zoom_out != (1.0, 1.0)


# ------------------------------------------------------------------ config files


def _coerce(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown {section} keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in values.items():
        default = getattr(cls(), key) if key != "terms" else None
        if isinstance(default, tuple) or key == "terms":
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from exc


def configs_from_dict(data: dict) -> tuple[TrainConfig, AttackConfig]:
    unknown = sorted(set(data) - {"train", "attack"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    return _coerce(TrainConfig, data.get("train", {}), "train"), _coerce(AttackConfig, data.get("attack", {}), "attack")


def configs_to_dict(train_cfg: TrainConfig, attack_cfg: AttackConfig) -> dict:
    def plain(obj):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(obj).items()}

    return {"train": plain(train_cfg), "attack": plain(attack_cfg)}


def load_config(path) -> tuple[TrainConfig, AttackConfig]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return configs_from_dict(data)


def save_config(path, train_cfg: TrainConfig, attack_cfg: AttackConfig) -> None:
    Path(path).write_text(json.dumps(configs_to_dict(train_cfg, attack_cfg), indent=2, sort_keys=True))


# ------------------------------------------------------------ state and helpers


@dataclass
class TrainState:
    student: det.ModelState
    teacher: det.ModelState
    iteration: int = 0
    velocity: np.ndarray | None = None
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.student.arch != self.teacher.arch:
            raise ValueError("student and teacher must share one architecture")
        if self.velocity is None:
            self.velocity = np.zeros_like(self.student.params)


def iteration_rng(seed: int, phase: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, phase, iteration])


def ema_update(teacher: det.ModelState, student: det.ModelState, decay: float) -> det.ModelState:
    """``decay * teacher + (1 - decay) * student``, computed in float64."""
    if teacher.arch != student.arch:
        raise ValueError("teacher and student architectures differ")
    if not 0 <= decay <= 1:
        raise ValueError("decay must lie in [0, 1]")
    if decay == 1:
        return teacher.copy()
    if decay == 0:
        return student.copy()
    mixed = decay * teacher.params.astype(np.float64) + (1 - decay) * student.params.astype(np.float64)
    return det.ModelState(teacher.arch, mixed)


def filter_pseudo_labels(dets: LabeledBoxes, threshold: float) -> LabeledBoxes:
    """Keep detections scoring at least ``threshold``; scores are dropped."""
    if dets.scores is None:
        raise ValueError("detections need scores")
    return dets.subset(dets.scores >= threshold).without_scores()


def resize_image(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an HWC image; antialiased when shrinking."""
    if (height, width) == img.shape[:2]:
        return img.copy()
    t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].double()
    shrink = height < img.shape[0] or width < img.shape[1]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False, antialias=shrink)
    return np.clip(out[0].permute(1, 2, 0).numpy(), 0, 1).astype(img.dtype)


def zoom_in(img: np.ndarray, ratio: float) -> np.ndarray:
    """Bilinear upscale to ``round(ratio * size)`` on both axes."""
    if not ratio > 1:
        raise ValueError(f"zoom-in ratio must exceed 1, got {ratio}")
    h, w = img.shape[:2]
    return resize_image(img, int(round(h * ratio)), int(round(w * ratio)))


def zoom_out(img: np.ndarray, labels: LabeledBoxes, r_in: float, r_out: float, min_side: float):
    """Downscale the strong image by ``r_out`` and map zoomed-in-frame labels onto it.

    Labels are scaled by ``r_out / r_in`` and then boxes shorter than
    ``min_side`` are removed.
    """
    if not 0 < r_out < 1:
        raise ValueError(f"zoom-out ratio must lie in (0, 1), got {r_out}")
    if not r_in >= 1:
        raise ValueError(f"zoom-in ratio must be at least 1, got {r_in}")
    h, w = img.shape[:2]
    out = resize_image(img, int(round(h * r_out)), int(round(w * r_out)))
    scaled = scale_boxes(labels, r_out / r_in)
    scaled = clip_boxes(scaled, out.shape[1], out.shape[0])
    return out, filter_min_size(scaled, min_side)


def snap_ratio(ratio: float, size: int, stride: int) -> float:
    """Nearest ratio whose scaled ``size`` is a positive multiple of ``stride``."""
    cells = max(1, int(round(size * ratio / stride)))
    return cells * stride / size


def _lr(cfg: TrainConfig, step: int, base: float | None = None) -> float:
    base = cfg.lr if base is None else base
    if cfg.warmup and step < cfg.warmup:
        return base * (step + 1) / cfg.warmup
    return base


def _apply_gradient(state: TrainState, grad: np.ndarray, cfg: TrainConfig, step: int, base_lr: float | None = None) -> None:
    norm = float(np.linalg.norm(grad))
    if not np.isfinite(norm):
        raise FloatingPointError("non-finite gradient")
    if cfg.grad_clip and norm > cfg.grad_clip:
        grad = grad * np.float32(cfg.grad_clip / norm)
    state.student, state.velocity = det.momentum_step(state.student, grad, state.velocity, _lr(cfg, step, base_lr), cfg.momentum)


def _sample(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.choice(n, size=min(k, n), replace=False)


def _rescue(state: TrainState, out_dir, tag: str) -> str | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / f"rescue_{tag}"
    save_train_state(path, state)
    return str(path)


# ------------------------------------------------------------------ source phase


def pretrain_source(
    images: Sequence[np.ndarray],
    labels: Sequence[LabeledBoxes],
    cfg: TrainConfig,
    arch: det.Architecture | None = None,
    init: det.ModelState | None = None,
    out_dir=None,
    log: Callable[[dict], None] | None = None,
) -> det.ModelState:
    """Supervised burn-in on labelled source images with flip augmentation."""
    model = init.copy() if init is not None else det.init_state(arch, seed=cfg.seed)
    state = TrainState(model, model)
    for it in range(cfg.burn_in):
        rng = iteration_rng(cfg.seed, _PHASE_BURN_IN, it)
        idx = _sample(rng, len(images), cfg.batch_size)
        batch = [weak_augment(images[i], labels[i], rng) for i in idx]
        loss, grad = det.loss_and_grad(state.student, np.stack([b[0] for b in batch]), [b[1] for b in batch])
        try:
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite source loss at burn-in step {it}")
            _apply_gradient(state, grad, cfg, it, cfg.burn_in_lr)
        except (FloatingPointError, det.DetectorError) as exc:
            raise TrainingError(str(exc), _rescue(state, out_dir, f"burnin_{it}")) from exc
        if log is not None:
            log({"phase": "burn_in", "iteration": it, "L_s": round(loss, 6)})
    return state.student


# ---------------------------------------------------------------- adaptation phase


@dataclass
class StepRecord:
    iteration: int
    L_s: float
    L_t: float
    attacked: bool
    num_pseudo: int
    attack_trace: list[float]
    r_in: float
    r_out: float

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["L_s"] = round(d["L_s"], 6)
        d["L_t"] = round(d["L_t"], 6)
        d["attack_trace"] = [round(v, 6) for v in d["attack_trace"]]
        d["r_in"] = round(d["r_in"], 6)
        d["r_out"] = round(d["r_out"], 6)
        return d


def teacher_pseudo_labels(
    teacher: det.ModelState, weak_images: np.ndarray, r_in: float, cfg: TrainConfig
) -> tuple[np.ndarray, list[LabeledBoxes]]:
    """Zoom the weak batch in by ``r_in`` and filter teacher detections on it."""
    if r_in > 1:
        zoomed = np.stack([zoom_in(x, r_in) for x in weak_images])
    else:
        zoomed = weak_images
    dets = det.detect(teacher, zoomed, cfg.detect_score_floor, cfg.nms_thresh)
    return zoomed, [filter_pseudo_labels(d, cfg.score_threshold) for d in dets]


def train_step(
    state: TrainState,
    source_images: Sequence[np.ndarray],
    source_labels: Sequence[LabeledBoxes],
    target_images: Sequence[np.ndarray],
    cfg: TrainConfig,
    attack_cfg: AttackConfig,
    rng: np.random.Generator,
    fill=0.5,
) -> StepRecord:
    """One mutual-learning iteration; updates ``state`` in place and returns its log record."""
    if len(source_images) == 0 or len(target_images) == 0:
        raise ValueError("train_step needs non-empty source and target batches")
    stride = state.student.arch.stride
    strong_cfg = StrongAugmentConfig()

    # strong augmentation of the source batch
    xs = np.stack([strong_augment(x, rng, strong_cfg, fill)[0] for x in source_images])
    # weak view of the target batch, then zoom-in for the teacher
    xw = np.stack([weak_augment(x, None, rng)[0] for x in target_images])
    h, w = xw.shape[1:3]
    r_in = snap_ratio(rng.uniform(*cfg.zoom_in), h, stride) if cfg.zoom_enabled else 1.0
    r_out = snap_ratio(rng.uniform(*cfg.zoom_out), h, stride) if cfg.zoom_enabled else 1.0

    state.teacher = ema_update(state.teacher, state.student, cfg.ema_decay)
    _, pseudo = teacher_pseudo_labels(state.teacher, xw, r_in, cfg)

    # strong view of the target batch, zoomed out with its pseudo-labels
    xts = [strong_augment(x, rng, strong_cfg, fill)[0] for x in xw]
    if r_out < 1:
        pairs = [zoom_out(x, p, r_in, r_out, cfg.min_side) for x, p in zip(xts, pseudo)]
        x_out = np.stack([p[0] for p in pairs])
        pseudo = [p[1] for p in pairs]
    else:
        x_out = np.stack(xts)
        pseudo = [filter_min_size(clip_boxes(scale_boxes(p, 1.0 / r_in), w, h), cfg.min_side) for p in pseudo]

    keep = [i for i, p in enumerate(pseudo) if len(p)]
    attacked = bool(keep) and should_attack(rng, attack_cfg.p_attack) and attack_cfg.steps > 0
    trace: list[float] = []
    x_adv = x_out
    if attacked:
        adv, steps = pgd(state.student, x_out[keep], [pseudo[i] for i in keep], attack_cfg)
        x_adv = x_out.copy()
        x_adv[keep] = adv
        trace = [float(np.mean(v)) for v in steps]

    flat = torch.from_numpy(state.student.params.copy()).requires_grad_(True)
    loss_s = det.supervised_loss(state.student, xs, list(source_labels), params=flat)
    total = cfg.source_weight * loss_s
    loss_t = torch.zeros(())
    if keep and cfg.target_weight > 0:
        loss_t = det.supervised_loss(state.student, x_adv[keep], [pseudo[i] for i in keep], params=flat)
        total = total + cfg.target_weight * loss_t
    (grad,) = torch.autograd.grad(total, flat)
    ls, lt = float(loss_s.detach()), float(loss_t.detach())
    if not (np.isfinite(ls) and np.isfinite(lt)):
        raise FloatingPointError(f"non-finite loss at iteration {state.iteration}: L_s={ls}, L_t={lt}")
    _apply_gradient(state, grad.numpy().astype(np.float32), cfg, state.iteration)
    record = StepRecord(state.iteration, ls, lt, attacked, int(sum(len(p) for p in pseudo)), trace, r_in, r_out)
    state.iteration += 1
    return record


def evaluate_model(model: det.ModelState, images, labels, class_names, cfg: TrainConfig | None = None) -> dict:
    nms_thresh = cfg.nms_thresh if cfg else 0.5
    dets = det.detect_many(model, images, score_thresh=0.05, nms_thresh=nms_thresh)
    return evaluate(dets, labels, class_names)


def pseudo_label_quality(teacher: det.ModelState, images, labels, cfg: TrainConfig, r_in: float = 1.0):
    """Pooled pseudo-label precision/recall on labelled images, in the original frame."""
    pseudo = []
    stride = teacher.arch.stride
    for start in range(0, len(images), 16):
        chunk = np.stack(images[start : start + 16])
        ratio = snap_ratio(r_in, chunk.shape[1], stride) if r_in > 1 else 1.0
        _, pl = teacher_pseudo_labels(teacher, chunk, ratio, cfg)
        pseudo.extend(scale_boxes(p, 1.0 / ratio) for p in pl)
    return pooled_pseudo_label_pr(pseudo, labels, 0.5)


# ------------------------------------------------------------------ checkpoints


def save_train_state(path, state: TrainState, extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"iteration": state.iteration, **(extra or {})}
    det.save_checkpoint(path / "student", state.student, meta)
    det.save_checkpoint(path / "teacher", state.teacher, meta)
    (path / "velocity.bin").write_bytes(state.velocity.astype("<f4").tobytes())
    (path / "state.json").write_text(json.dumps({"iteration": state.iteration, "history": state.history, **(extra or {})}, sort_keys=True))


def load_train_state(path) -> tuple[TrainState, dict]:
    path = Path(path)
    student, _ = det.load_checkpoint(path / "student")
    teacher, _ = det.load_checkpoint(path / "teacher")
    velocity = np.frombuffer((path / "velocity.bin").read_bytes(), dtype="<f4").astype(np.float32)
    info = json.loads((path / "state.json").read_text())
    state = TrainState(student, teacher, info["iteration"], velocity, info.get("history", []))
    return state, info


# ------------------------------------------------------------------------ driver


class MetricsLog:
    """Append-only JSON-lines log; the header line is the only one with a timestamp."""

    def __init__(self, path=None, header: dict | None = None, append: bool = False):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None and not (append and self.path.exists()):
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps({"header": header or {}, "created": time.time()}) + "\n")

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    """Records of a metrics log, header excluded."""
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        rec = json.loads(line)
        if n == 0 and "header" in rec:
            continue
        out.append(rec)
    return out


@dataclass
class TrainData:
    source_images: Sequence[np.ndarray]
    source_labels: Sequence[LabeledBoxes]
    target_images: Sequence[np.ndarray]
    eval_images: Sequence[np.ndarray] = ()
    eval_labels: Sequence[LabeledBoxes] = ()
    class_names: Sequence[str] = ()

    @classmethod
    def from_dataset(cls, ds) -> "TrainData":
        # target_train labels stay in the dataset; only pixels are handed over
        return cls(
            ds["source_train"].images,
            ds["source_train"].labels,
            ds["target_train"].images,
            ds["target_eval"].images,
            ds["target_eval"].labels,
            ds.classes,
        )


def dataset_mean(images: Sequence[np.ndarray]) -> np.ndarray:
    return np.mean([x.reshape(-1, 3).mean(0) for x in images], axis=0)


def train(
    data: TrainData,
    cfg: TrainConfig,
    attack_cfg: AttackConfig,
    arch: det.Architecture | None = None,
    source_model: det.ModelState | None = None,
    out_dir=None,
    log: Callable[[dict], None] | None = None,
    resume: TrainState | None = None,
    stop_after: int | None = None,
) -> TrainState:
    """Burn-in (unless ``source_model`` or ``resume`` is given) then ``cfg.max_iter`` mutual-learning steps.

    Returns the final TrainState; ``state.history`` holds the evaluation
    points. ``stop_after`` halts early (used to simulate interruption).
    """
    log = log or (lambda rec: None)
    if resume is not None:
        state = resume
    else:
        if source_model is None:
            source_model = pretrain_source(data.source_images, data.source_labels, cfg, arch, out_dir=out_dir, log=log)
        state = TrainState(source_model.copy(), source_model.copy())
    fill = dataset_mean(data.source_images)
    can_eval = len(data.eval_images) > 0
    while state.iteration < cfg.max_iter:
        if stop_after is not None and state.iteration >= stop_after:
            break
        rng = iteration_rng(cfg.seed, _PHASE_ADAPT, state.iteration)
        si = _sample(rng, len(data.source_images), cfg.batch_size)
        ti = _sample(rng, len(data.target_images), cfg.batch_size)
        try:
            rec = train_step(
                state,
                [data.source_images[i] for i in si],
                [data.source_labels[i] for i in si],
                [data.target_images[i] for i in ti],
                cfg,
                attack_cfg,
                rng,
                fill,
            )
        except (FloatingPointError, det.DetectorError) as exc:
            raise TrainingError(str(exc), _rescue(state, out_dir, f"iter_{state.iteration}")) from exc
        log({"phase": "adapt", **rec.to_dict()})
        if can_eval and cfg.eval_every and state.iteration % cfg.eval_every == 0 and state.iteration < cfg.max_iter:
            _eval_point(state, data, cfg, log)
        if out_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_train_state(Path(out_dir) / "checkpoint", state)
    if can_eval and state.iteration >= cfg.max_iter:
        _eval_point(state, data, cfg, log)
    if out_dir is not None:
        save_train_state(Path(out_dir) / "checkpoint", state)
    return state


def _eval_point(state: TrainState, data: TrainData, cfg: TrainConfig, log) -> None:
    report = evaluate_model(state.teacher, data.eval_images, data.eval_labels, data.class_names, cfg)
    entry = {"phase": "eval", "iteration": state.iteration, "teacher": report}
    state.history.append(entry)
    log(entry)
