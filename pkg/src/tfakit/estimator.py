"""scikit-learn compatible wrappers around the box-predictor head.

``BoxPredictor`` trains a head from scratch (the base-training stage);
``FewShotFineTuner`` extends a fitted ``BoxPredictor`` with novel classes
and fine-tunes the last layer on a small balanced set.

Both take frozen features ``X`` (n, d), labels ``y`` (category ids, -1 for
background) and optional box-regression targets (n, 4).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ValidationError
from .features import BACKGROUND, FeatureSet
from .head import (
    Heads, TrainConfig, forward_scores, init_head, predict, predict_deltas, softmax, train_head,
)


def _check_targets(reg_targets, y):
    if reg_targets is None:
        return np.zeros((len(y), 4))
    T = check_array(reg_targets, dtype=np.float64)
    if T.shape != (len(y), 4):
        raise ValidationError(f"reg_targets must be ({len(y)}, 4), got {T.shape}")
    return np.where((y == BACKGROUND)[:, None], 0.0, T)


def _as_featureset(X, y, reg_targets) -> FeatureSet:
    n = X.shape[0]
    return FeatureSet(np.zeros(n), np.tile([0.0, 0.0, 1.0, 1.0], (n, 1)), y, reg_targets, X)


class BoxPredictor(ClassifierMixin, BaseEstimator):
    """Last-layer classifier and box regressor trained with momentum SGD.

    Parameters
    ----------
    classifier : {"cosine", "fc"}
        Scaled cosine similarity (no bias) or affine classifier.
    alpha : float
        Cosine scale factor; ignored for ``fc``.
    lr, momentum, weight_decay, iters, batch_size, loc_weight
        Optimiser and loss settings.
    random_state : int
        Seed for initialisation and batch shuffling.
    """

    def __init__(self, classifier="cosine", alpha=20.0, lr=0.02, momentum=0.9,
                 weight_decay=1e-4, iters=2000, batch_size=128, loc_weight=1.0,
                 random_state=0):
        self.classifier = classifier
        self.alpha = alpha
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.iters = iters
        self.batch_size = batch_size
        self.loc_weight = loc_weight
        self.random_state = random_state

    def _train_config(self, freeze=False) -> TrainConfig:
        return TrainConfig(iters=self.iters, batch_size=self.batch_size, lr=self.lr,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           seed=self.random_state, freeze_base_classifier_columns=freeze,
                           loc_weight=self.loc_weight)

    def _validate(self, X, y, reg_targets):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        return X, y, _check_targets(reg_targets, y)

    def _set_fitted(self, heads: Heads, trace):
        self.heads_ = heads
        self.classes_ = np.array(list(heads.class_ids) + [BACKGROUND])
        self.n_features_in_ = heads.dim
        self.loss_curve_ = list(trace)
        return self

    def fit(self, X, y, reg_targets=None):
        X, y, T = self._validate(X, y, reg_targets)
        classes = sorted(set(y.tolist()) - {BACKGROUND})
        if not classes:
            raise ValidationError("need at least one foreground class")
        heads = init_head("random", d=X.shape[1], base_classes=classes,
                          seed=self.random_state, kind=self.classifier, alpha=self.alpha)
        heads, trace = train_head(heads, _as_featureset(X, y, T), self._train_config())
        return self._set_fitted(heads, trace)

    def _check_X(self, X):
        check_is_fitted(self, "heads_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def decision_function(self, X):
        """Raw class scores, background column last."""
        X = self._check_X(X)
        return forward_scores(self.heads_, X)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        best = self.decision_function(X).argmax(axis=1)
        return self.classes_[best]

    def predict_deltas(self, X):
        """Box deltas for every foreground class, shape (n, C, 4)."""
        X = self._check_X(X)
        return predict_deltas(self.heads_, X)

    def detect(self, feats: FeatureSet, score_thresh=0.05, nms_iou=0.5, max_dets=100):
        """Run full box inference over a :class:`FeatureSet`."""
        check_is_fitted(self, "heads_")
        return predict(self.heads_, feats, score_thresh, nms_iou, max_dets)


class FewShotFineTuner(BoxPredictor):
    """Second-stage fine-tuning on top of a fitted :class:`BoxPredictor`.

    Classes in ``y`` that the base predictor does not know become novel
    classes. Their weights start random (``init="random"``) or from a head
    first trained on the novel records alone (``init="novel"``).
    """

    def __init__(self, base_predictor=None, init="random", freeze_base=False,
                 classifier=None, alpha=None, lr=0.001, momentum=0.9, weight_decay=1e-4,
                 iters=2000, batch_size=128, loc_weight=1.0, random_state=0):
        self.base_predictor = base_predictor
        self.init = init
        self.freeze_base = freeze_base
        super().__init__(classifier=classifier, alpha=alpha, lr=lr, momentum=momentum,
                         weight_decay=weight_decay, iters=iters, batch_size=batch_size,
                         loc_weight=loc_weight, random_state=random_state)

    def fit(self, X, y, reg_targets=None):
        if self.base_predictor is None:
            raise ValidationError("FewShotFineTuner needs a fitted base_predictor")
        check_is_fitted(self.base_predictor, "heads_")
        base_heads = self.base_predictor.heads_
        X, y, T = self._validate(X, y, reg_targets)
        base = list(base_heads.class_ids)
        novel = sorted(set(y.tolist()) - {BACKGROUND} - set(base))
        feats = _as_featureset(X, y, T)
        cfg = self._train_config(freeze=self.freeze_base)
        heads = init_head(self.init, base_head=base_heads, novel_features=feats,
                          base_classes=base, novel_classes=novel, seed=self.random_state,
                          kind=self.classifier, alpha=self.alpha, novel_cfg=cfg)
        heads, trace = train_head(heads, feats, cfg, base_classes=base)
        self.novel_classes_ = np.array(novel, dtype=np.int64)
        return self._set_fitted(heads, trace)
