"""scikit-learn compatible classifier wrapping the training loops."""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import type_of_target
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import AugmentationSpec, SslDataset
from .model import forward, softmax
from .optim import FlatMatchConfig
from .trainers import (
    TRAINERS,
    FixedLabelConfig,
    ModelConfig,
    OptimizerConfig,
    SslConfig,
    TrainConfig,
)

METHODS = tuple(TRAINERS)


class FlatMatchClassifier(ClassifierMixin, BaseEstimator):
    """Semi-supervised MLP classifier.

    ``fit(X, y)`` takes every training row at once; rows whose label equals
    ``unlabeled_label`` (default ``-1``) are treated as unlabeled.  ``method``
    picks the training loop: ``supervised``, ``ssl_baseline``, ``flatmatch``,
    ``flatmatch_e`` or ``flatmatch_fixlabel``.

    Predictions come from the weight-averaged (EMA) model unless
    ``use_ema=False``.
    """

    def __init__(
        self,
        method: str = "flatmatch",
        hidden_dims: tuple[int, ...] = (32, 32),
        epochs: int = 40,
        steps_per_epoch: int = 50,
        labeled_batch: int = 64,
        mu: int = 7,
        lr: float = 0.03,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        tau: float = 0.95,
        lambda_u: float = 1.0,
        rho: float = 0.1,
        alpha: float = 0.999,
        lambda_xsharp: float = 1.0,
        num_fix: int = 50,
        pretrain_epochs: int = 16,
        weak_jitter_std: float = 0.05,
        strong_jitter_std: float = 0.2,
        strong_rotation_max_deg: float = 30.0,
        ema_decay: float = 0.999,
        use_ema: bool = True,
        unlabeled_label: int = -1,
        random_state: int = 0,
    ):
        self.method = method
        self.hidden_dims = hidden_dims
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.labeled_batch = labeled_batch
        self.mu = mu
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.tau = tau
        self.lambda_u = lambda_u
        self.rho = rho
        self.alpha = alpha
        self.lambda_xsharp = lambda_xsharp
        self.num_fix = num_fix
        self.pretrain_epochs = pretrain_epochs
        self.weak_jitter_std = weak_jitter_std
        self.strong_jitter_std = strong_jitter_std
        self.strong_rotation_max_deg = strong_rotation_max_deg
        self.ema_decay = ema_decay
        self.use_ema = use_ema
        self.unlabeled_label = unlabeled_label
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        steps = self.epochs * self.steps_per_epoch
        return TrainConfig(
            model=ModelConfig(tuple(self.hidden_dims)),
            augment=AugmentationSpec(self.weak_jitter_std, self.strong_jitter_std, self.strong_rotation_max_deg),
            optimizer=OptimizerConfig(self.lr, self.momentum, self.weight_decay),
            ssl=SslConfig(self.tau, self.lambda_u),
            flatmatch=FlatMatchConfig(
                rho=self.rho,
                alpha=self.alpha,
                tau=self.tau,
                lambda_xsharp=self.lambda_xsharp,
                efficient=self.method == "flatmatch_e",
            ),
            fixed_label=FixedLabelConfig(self.method == "flatmatch_fixlabel", self.num_fix, self.pretrain_epochs),
            epochs=self.epochs,
            steps_per_epoch=self.steps_per_epoch,
            labeled_batch=self.labeled_batch,
            mu=self.mu,
            seed=int(self.random_state),
            eval_every=max(steps, 1),
            ema_decay=self.ema_decay,
        ).validate()

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        cfg = self._train_config()
        unlabeled = y == self.unlabeled_label
        if unlabeled.all():
            raise ValueError("at least one labeled sample is required")
        if type_of_target(y[~unlabeled]) not in ("binary", "multiclass"):
            raise ValueError("labels must be discrete class values")
        self._encoder = LabelEncoder().fit(y[~unlabeled])
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need labeled samples from at least two classes")
        xl = X[~unlabeled]
        yl = self._encoder.transform(y[~unlabeled]).astype(np.intp)
        xu = X[unlabeled]
        if len(xu) == 0:
            if self.method != "supervised":
                raise ValueError(f"method {self.method!r} needs unlabeled rows (label {self.unlabeled_label})")
            xu = xl
        # the labeled rows double as the monitoring set for the training record
        ds = SslDataset(xl, yl, xu, xl, yl, len(self.classes_))
        result = TRAINERS[self.method](cfg, dataset=ds)
        self.n_features_in_ = X.shape[1]
        self.spec_ = result.spec
        self.theta_ = result.theta
        self.eval_theta_ = result.eval_theta
        self.record_ = result.record
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "theta_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        theta = self.eval_theta_ if self.use_ema else self.theta_
        logits = forward(self.spec_, theta, X).data
        if len(self.classes_) == 2:
            return logits[:, 1] - logits[:, 0]
        return logits

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "theta_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        theta = self.eval_theta_ if self.use_ema else self.theta_
        return softmax(forward(self.spec_, theta, X).data)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.non_deterministic = False
        return tags

    def get_config(self) -> TrainConfig:
        """The resolved :class:`TrainConfig` these parameters map to."""
        return dataclasses.replace(self._train_config())
