"""scikit-learn style estimators wrapping the instrumented training loop.

>>> from noisygen.estimators import DPSGDClassifier
>>> clf = DPSGDClassifier(iterations=20, batch_size=5, random_state=0).fit(X, y)  # doctest: +SKIP
>>> clf.generalization_bound("kl").total  # doctest: +SKIP

After ``fit`` the estimator exposes ``params_`` (flat parameter vector),
``trajectory_`` (the :class:`~noisygen.optimizers.TrajectoryRecord`),
``classes_`` and ``n_features_in_``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .bound_engine import BoundSpec, evaluate
from .learning_core import LabeledDataset, make_model
from .noise_channels import Divergence, NoiseModel
from .optimizers import DomainSpec, LearningRate, TrainConfig, run_training
from .stat_estimators import LossAssumption

__all__ = ["NoisyIterativeClassifier", "DPSGDClassifier", "SGLDClassifier"]


def _domain(kind: str, radius: float) -> DomainSpec:
    if kind == "none":
        return DomainSpec()
    if kind == "l2_ball":
        return DomainSpec.l2_ball(radius)
    if kind == "l1_ball":
        return DomainSpec.l1_ball(radius)
    raise ValueError(f"unknown domain {kind!r}")


class NoisyIterativeClassifier(ClassifierMixin, BaseEstimator):
    """Classifier trained by a noisy projected gradient method.

    Parameters
    ----------
    model : {"logistic", "mlp"}
    hidden : tuple of int
        Hidden widths of the MLP.
    algorithm : {"noisy_sgd", "dp_sgd", "sgld"}
    schedule : {"without_replacement", "with_replacement"}
    batch_size, iterations, epochs : int
        ``iterations=None`` means one pass (without replacement) or
        ``epochs`` passes over the fixed partition (with replacement).
    learning_rate, lr_decay, lr_decay_steps : float, float, int
    noise : {"gaussian", "laplace", "uniform"}
    noise_scale : float
        Noise magnitude for ``noisy_sgd``.
    beta_scale : float
        SGLD inverse temperature is ``beta_scale / (2 eta_t)``.
    clip : float or None
        Per-example clipping bound in the noise's norm.
    domain : {"none", "l2_ball", "l1_ball"}
    radius : float
    stats : {"in_batch", "hold_out"}
    output : {"last", "average", "argmin_loss"}
    random_state : int
    """

    def __init__(self, model="logistic", hidden=(16,), algorithm="noisy_sgd",
                 schedule="without_replacement", batch_size=10, iterations=None, epochs=1,
                 learning_rate=0.1, lr_decay=1.0, lr_decay_steps=2000, noise="gaussian",
                 noise_scale=0.0, beta_scale=1e6, clip=None, domain="none", radius=1.0,
                 stats="in_batch", output="last", random_state=0):
        self.model = model
        self.hidden = hidden
        self.algorithm = algorithm
        self.schedule = schedule
        self.batch_size = batch_size
        self.iterations = iterations
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.lr_decay_steps = lr_decay_steps
        self.noise = noise
        self.noise_scale = noise_scale
        self.beta_scale = beta_scale
        self.clip = clip
        self.domain = domain
        self.radius = radius
        self.stats = stats
        self.output = output
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            algorithm=self.algorithm,
            schedule=self.schedule,
            batch_size=self.batch_size,
            iterations=self.iterations,
            epochs=self.epochs,
            learning_rate=LearningRate(self.learning_rate, self.lr_decay, self.lr_decay_steps),
            noise=NoiseModel(self.noise),
            noise_scale=self.noise_scale,
            beta_scale=self.beta_scale,
            clip=self.clip,
            domain=_domain(self.domain, self.radius),
            stats_mode=self.stats,
            output=self.output,
        )

    def fit(self, X, y, X_holdout=None, y_holdout=None):
        """Train on ``(X, y)``; ``X_holdout`` feeds ``stats="hold_out"``."""
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        k = len(self.classes_)
        self.model_ = make_model(self.model, X.shape[1], k, hidden=tuple(self.hidden))
        holdout = None
        if X_holdout is not None:
            Xh, yh = check_X_y(X_holdout, y_holdout)
            holdout = LabeledDataset(Xh, np.searchsorted(self.classes_, yh), k)
        data = LabeledDataset(X, codes, k)
        self.params_, self.trajectory_ = run_training(
            self.model_, data, self._train_config(), self.random_state, holdout=holdout)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.model_.logits(self.params_, X)

    def predict_proba(self, X):
        logits = self.decision_function(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def generalization_bound(self, divergence="kl", assumption: LossAssumption | None = None,
                             method="auto", use_decay=True):
        """Bound on the expected gap of the fitted run (0-1 loss by default)."""
        check_is_fitted(self, "trajectory_")
        spec = BoundSpec(Divergence(divergence), assumption or LossAssumption.bounded(1.0),
                         self.trajectory_.n, use_decay, method)
        return evaluate(self.trajectory_, spec)


class DPSGDClassifier(NoisyIterativeClassifier):
    """Projected DP-SGD: clipped per-example gradients, noise magnitude = learning rate."""

    def __init__(self, model="logistic", hidden=(16,), algorithm="dp_sgd",
                 schedule="without_replacement", batch_size=10, iterations=None, epochs=1,
                 learning_rate=0.1, lr_decay=1.0, lr_decay_steps=2000, noise="gaussian",
                 noise_scale=0.0, beta_scale=1e6, clip=1.0, domain="l2_ball", radius=1.0,
                 stats="in_batch", output="last", random_state=0):
        super().__init__(model, hidden, algorithm, schedule, batch_size, iterations, epochs,
                         learning_rate, lr_decay, lr_decay_steps, noise, noise_scale, beta_scale,
                         clip, domain, radius, stats, output, random_state)


class SGLDClassifier(NoisyIterativeClassifier):
    """Stochastic gradient Langevin dynamics over a fixed mini-batch partition."""

    def __init__(self, model="mlp", hidden=(16,), algorithm="sgld",
                 schedule="with_replacement", batch_size=50, iterations=None, epochs=10,
                 learning_rate=0.03, lr_decay=0.96, lr_decay_steps=1000, noise="gaussian",
                 noise_scale=0.0, beta_scale=1e6, clip=None, domain="none", radius=1.0,
                 stats="in_batch", output="last", random_state=0):
        super().__init__(model, hidden, algorithm, schedule, batch_size, iterations, epochs,
                         learning_rate, lr_decay, lr_decay_steps, noise, noise_scale, beta_scale,
                         clip, domain, radius, stats, output, random_state)
