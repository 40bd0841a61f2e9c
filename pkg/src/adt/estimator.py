"""scikit-learn style wrapper around burn-in plus adversarial mean-teacher adaptation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import detector as det
from ._validation import check_images, check_labels, check_probability
from .attack import AttackConfig
from .evaluation import evaluate
from .synthdata import CLASS_NAMES
from .trainer import TrainConfig, TrainData, pretrain_source, train


class AdversarialDefenseTeacher(BaseEstimator):
    """Adapt a two-stage detector from labelled source images to unlabelled target images.

    ``fit(X_source, y_source, X_target)`` runs the source burn-in and then the
    mean-teacher loop with adversarial target views and zoom-in/zoom-out
    pseudo-labelling. ``predict`` uses the teacher, the model usually reported
    after adaptation. Set ``p_attack=0`` and ``zoom=False`` for the plain
    mean-teacher baseline.
    """

    def __init__(
        self,
        num_classes: int = 5,
        burn_in: int = 2000,
        max_iter: int = 1000,
        batch_size: int = 8,
        lr: float = 0.02,
        burn_in_lr: float | None = None,
        ema_decay: float = 0.9996,
        score_threshold: float = 0.8,
        p_attack: float = 1.0,
        epsilon: float = 4.0 / 255,
        alpha: float = 1.0 / 255,
        attack_steps: int = 3,
        zoom: bool = True,
        min_side: float = 8.0,
        seed: int = 0,
    ):
        self.num_classes = num_classes
        self.burn_in = burn_in
        self.max_iter = max_iter
        self.batch_size = batch_size
        self.lr = lr
        self.burn_in_lr = burn_in_lr
        self.ema_decay = ema_decay
        self.score_threshold = score_threshold
        self.p_attack = p_attack
        self.epsilon = epsilon
        self.alpha = alpha
        self.attack_steps = attack_steps
        self.zoom = zoom
        self.min_side = min_side
        self.seed = seed

    def _configs(self) -> tuple[TrainConfig, AttackConfig]:
        check_probability(self.p_attack, "p_attack")
        zoom = {} if self.zoom else dict(zoom_in=(1.0, 1.0), zoom_out=(1.0, 1.0), min_side=0.0)
        tc = TrainConfig(
            ema_decay=self.ema_decay,
            score_threshold=self.score_threshold,
            lr=self.lr,
            burn_in_lr=self.burn_in_lr,
            max_iter=self.max_iter,
            burn_in=self.burn_in,
            batch_size=self.batch_size,
            seed=self.seed,
            **({"min_side": self.min_side} if self.zoom else {}),
            **zoom,
        )
        ac = AttackConfig(alpha=self.alpha, epsilon=self.epsilon, steps=self.attack_steps, p_attack=self.p_attack)
        return tc, ac

    def fit(self, X_source, y_source, X_target, source_model: det.ModelState | None = None):
        arch = det.Architecture(num_classes=self.num_classes)
        xs = check_images(X_source, "X_source", arch.stride)
        xt = check_images(X_target, "X_target", arch.stride)
        ys = check_labels(y_source, len(xs), self.num_classes, "y_source")
        tc, ac = self._configs()
        if source_model is None:
            source_model = pretrain_source(list(xs), ys, tc, arch)
        elif source_model.arch.num_classes != self.num_classes:
            raise ValueError("source_model class count differs from num_classes")
        self.source_model_ = source_model
        data = TrainData(list(xs), ys, list(xt))
        state = train(data, tc, ac, source_model=source_model)
        self.teacher_ = state.teacher
        self.student_ = state.student
        self.n_iter_ = state.iteration
        return self

    def predict(self, X, score_threshold: float = 0.05) -> list:
        check_is_fitted(self, "teacher_")
        x = check_images(X, "X", self.teacher_.arch.stride)
        return det.detect_many(self.teacher_, list(x), score_thresh=score_threshold)

    def score(self, X, y) -> float:
        """mAP@0.5 of the teacher, in percent."""
        preds = self.predict(X)
        labels = check_labels(y, len(preds), self.num_classes, "y")
        names = [CLASS_NAMES[k] if k < len(CLASS_NAMES) else f"class{k}" for k in range(self.num_classes)]
        return float(evaluate(preds, labels, names)["mAP50"])
