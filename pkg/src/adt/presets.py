"""Named ablation arms and multi-seed sweeps over them.

An arm is only a set of config overrides, so arms differ in exactly the
switched variable. The source model is trained once per seed and shared by
every arm of that seed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import detector as det
from .attack import AttackConfig
from .evaluation import pooled_pseudo_label_pr
from .geometry import scale_boxes
from .synthdata import DataConfig, make_dataset
from .trainer import (
    MetricsLog,
    TrainConfig,
    TrainData,
    configs_to_dict,
    evaluate_model,
    pretrain_source,
    snap_ratio,
    train,
    zoom_in,
)

logger = logging.getLogger(__name__)

NO_ZOOM = dict(zoom_in=(1.0, 1.0), zoom_out=(1.0, 1.0), min_side=0.0)

# arm name -> (train overrides, attack overrides); None marks the no-adaptation arm
ARMS: dict[str, tuple[dict, dict] | None] = {
    "source_only": None,
    "mt": (NO_ZOOM, {"p_attack": 0.0}),
    "ad": (NO_ZOOM, {"p_attack": 1.0}),
    "zz": ({}, {"p_attack": 0.0}),
    "adt": ({}, {"p_attack": 1.0}),
}

PRESETS = {
    "ablation": ("source_only", "mt", "ad", "zz", "adt"),
    "p-attack": ("p0", "p0.5", "p1"),
}

# settings that fit the synthetic 96x96 task on one CPU core
DESK_TRAIN = dict(lr=0.01, burn_in_lr=0.04, burn_in=2400, max_iter=400, ema_decay=0.99, eval_every=100)
DESK_ATTACK: dict = {}


def desk_configs(**train_overrides) -> tuple[TrainConfig, AttackConfig]:
    """Train/attack configs of the desk-scale preset."""
    return TrainConfig(**{**DESK_TRAIN, **train_overrides}), AttackConfig(**DESK_ATTACK)


def arm_overrides(name: str) -> tuple[dict, dict] | None:
    """Overrides for a named arm; ``p<v>`` is full ADT with ``P_attack = v``."""
    if name in ARMS:
        return ARMS[name]
    if name.startswith("p"):
        try:
            p = float(name[1:])
        except ValueError:
            pass
        else:
            return {}, {"p_attack": p}
    raise KeyError(f"unknown arm {name!r}; choose from {sorted(ARMS)} or p<value>")


def arm_configs(name: str, train_cfg: TrainConfig, attack_cfg: AttackConfig):
    over = arm_overrides(name)
    if over is None:
        return train_cfg, attack_cfg
    t, a = over
    return dataclasses.replace(train_cfg, **t), dataclasses.replace(attack_cfg, **a)


@dataclass
class ArmResult:
    arm: str
    seed: int
    final: dict
    history: list[dict]
    seconds: float


def run_arm(
    name: str,
    data: TrainData,
    source_model: det.ModelState,
    train_cfg: TrainConfig,
    attack_cfg: AttackConfig,
    out_dir=None,
) -> ArmResult:
    t0 = time.time()
    tc, ac = arm_configs(name, train_cfg, attack_cfg)
    if arm_overrides(name) is None:
        final = evaluate_model(source_model, data.eval_images, data.eval_labels, data.class_names, tc)
        return ArmResult(name, tc.seed, final, [], time.time() - t0)
    log = None
    if out_dir is not None:
        log = MetricsLog(Path(out_dir) / "metrics.jsonl", {"arm": name, "config": configs_to_dict(tc, ac)})
    state = train(data, tc, ac, source_model=source_model, out_dir=out_dir, log=log)
    final = state.history[-1]["teacher"] if state.history else {}
    return ArmResult(name, tc.seed, final, state.history, time.time() - t0)


def source_model_for(data: TrainData, cfg: TrainConfig, cache_dir=None) -> det.ModelState:
    """Burn-in model for ``cfg.seed``, read from / written to ``cache_dir`` when given."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"source_seed{cfg.seed}_burnin{cfg.burn_in}"
        if path.with_suffix(".json").exists():
            model, meta = det.load_checkpoint(path)
            if meta.get("config") == configs_to_dict(cfg, AttackConfig())["train"]:
                return model
    model = pretrain_source(data.source_images, data.source_labels, cfg)
    if path is not None:
        det.save_checkpoint(path, model, {"config": configs_to_dict(cfg, AttackConfig())["train"]})
    return model


def run_sweep(
    arms: Sequence[str],
    seeds: Sequence[int],
    data_cfg: DataConfig,
    train_cfg: TrainConfig,
    attack_cfg: AttackConfig,
    out_dir=None,
    cache_dir=None,
    progress: Callable[[ArmResult], None] | None = None,
) -> dict:
    """Run every arm for every seed; the seed drives data, initialisation and training."""
    for a in arms:
        arm_overrides(a)
    results: list[ArmResult] = []
    for seed in seeds:
        ds = make_dataset(dataclasses.replace(data_cfg, seed=seed))
        data = TrainData.from_dataset(ds)
        tc = dataclasses.replace(train_cfg, seed=seed)
        source = source_model_for(data, tc, cache_dir)
        for a in arms:
            sub = None if out_dir is None else Path(out_dir) / f"seed{seed}" / a
            res = run_arm(a, data, source, tc, attack_cfg, sub)
            results.append(res)
            if progress is not None:
                progress(res)
    summary = summarize(results)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def summarize(results: Sequence[ArmResult]) -> dict:
    arms: dict[str, dict] = {}
    for r in results:
        entry = arms.setdefault(r.arm, {"seeds": [], "mAP50": [], "mAP": [], "seconds": []})
        entry["seeds"].append(r.seed)
        entry["mAP50"].append(r.final.get("mAP50"))
        entry["mAP"].append(r.final.get("mAP"))
        entry["seconds"].append(round(r.seconds, 2))
        entry["history"] = entry.get("history", []) + [
            [(h["iteration"], h["teacher"]["mAP50"]) for h in r.history]
        ]
    for name, entry in arms.items():
        vals = [v for v in entry["mAP50"] if v is not None]
        entry["mean_mAP50"] = float(np.mean(vals)) if vals else None
        over = arm_overrides(name)
        entry["p_attack"] = None if over is None else over[1].get("p_attack")
    return {"arms": arms, "order": list(arms)}


def pseudo_label_curve(
    teacher: det.ModelState,
    images: Sequence[np.ndarray],
    labels: Sequence,
    cfg: TrainConfig,
    r_in: float,
    thresholds: Sequence[float],
) -> list[tuple[float, float | None, float | None]]:
    """Pooled (threshold, precision, recall) of teacher pseudo-labels on the original frame."""
    stride = teacher.arch.stride
    scored = []
    for start in range(0, len(images), 16):
        chunk = np.stack(images[start : start + 16])
        ratio = snap_ratio(r_in, chunk.shape[1], stride) if r_in > 1 else 1.0
        zoomed = np.stack([zoom_in(x, ratio) for x in chunk]) if ratio > 1 else chunk
        for d in det.detect(teacher, zoomed, cfg.detect_score_floor, cfg.nms_thresh):
            scored.append(scale_boxes(d, 1.0 / ratio))
    curve = []
    for t in thresholds:
        pseudo = [d.subset(d.scores >= t).without_scores() for d in scored]
        p, r = pooled_pseudo_label_pr(pseudo, labels, 0.5)
        curve.append((float(t), p, r))
    return curve


def recall_at_precision(curve, precision: float) -> float:
    """Best recall over thresholds whose precision reaches ``precision``; 0 if none does."""
    ok = [r for _, p, r in curve if p is not None and p >= precision - 1e-12]
    return max(ok) if ok else 0.0


def zoom_recall_study(
    seeds: Sequence[int],
    data_cfg: DataConfig,
    train_cfg: TrainConfig,
    r_in: float = 1.5,
    thresholds: Sequence[float] = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2)),
    cache_dir=None,
) -> list[dict]:
    """Source-teacher pseudo-label recall with and without zoom-in, at matched precision.

    The reference point is the unzoomed teacher at ``train_cfg.score_threshold``;
    the zoomed teacher is credited with its best recall among thresholds that
    are at least as precise.
    """
    rows = []
    for seed in seeds:
        ds = make_dataset(dataclasses.replace(data_cfg, seed=seed))
        data = TrainData.from_dataset(ds)
        tc = dataclasses.replace(train_cfg, seed=seed)
        teacher = source_model_for(data, tc, cache_dir)
        ts = sorted(set(thresholds) | {tc.score_threshold})
        plain = pseudo_label_curve(teacher, list(data.eval_images), list(data.eval_labels), tc, 1.0, ts)
        zoomed = pseudo_label_curve(teacher, list(data.eval_images), list(data.eval_labels), tc, r_in, ts)
        _, p_ref, r_ref = next(c for c in plain if c[0] == tc.score_threshold)
        rows.append(
            {
                "seed": seed,
                "precision": p_ref,
                "recall_plain": r_ref,
                "recall_zoom": recall_at_precision(zoomed, p_ref if p_ref is not None else 0.0),
                "curve_plain": plain,
                "curve_zoom": zoomed,
            }
        )
    return rows
