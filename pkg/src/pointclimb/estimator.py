"""scikit-learn style wrapper around the class-incremental trainer.

``fit`` learns the first task, every ``partial_fit`` call after it learns a
task of new classes from that task's data alone.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .data import PointSet, TaskDataset
from .exceptions import InvalidArgumentError
from .losses import DistillConfig
from .tensor import _softmax_np, no_grad
from .trainer import TrainConfig, advance_task, predict_logits, start_run


def check_point_clouds(X, min_points=1):
    """Validate a batch of clouds and return it as a float64 ``[N, P, 3]`` array."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim != 3 or X.shape[-1] != 3:
        raise InvalidArgumentError(f"expected point clouds of shape [N, P, 3], got {X.shape}")
    if X.shape[1] < min_points:
        raise InvalidArgumentError(f"need at least {min_points} points per cloud, got {X.shape[1]}")
    return X


def check_task_labels(y, n_samples):
    y = column_or_1d(np.asarray(y), warn=True)
    if len(y) != n_samples:
        raise InvalidArgumentError(f"{n_samples} clouds but {len(y)} labels")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise InvalidArgumentError("labels must be integer class ids")
    return y.astype(np.int64)


class IncrementalPointCloudClassifier(ClassifierMixin, BaseEstimator):
    """Point cloud classifier that grows its label set one task at a time.

    Parameters
    ----------
    loss : {"ft", "lwf", "census"}
        Objective for tasks after the first; the first is plain cross-entropy.
    backbone : {"pointnet_lite", "edgeconv_lite"}
    widths : list of int or None
        Shared MLP widths; None uses the backbone default.
    tau, lambda_lwf : float
        Distillation temperature and the fixed LwF weight.
    random_state : int
        Seeds initialisation, batch order and point subsampling.
    """

    def __init__(self, loss="census", backbone="pointnet_lite", epochs=10, batch_size=16,
                 lr=3e-3, n_points=128, widths=None, aggregation="max", k_neighbors=8,
                 tau=2.0, lambda_lwf=1.0, random_state=0):
        self.loss = loss
        self.backbone = backbone
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.n_points = n_points
        self.widths = widths
        self.aggregation = aggregation
        self.k_neighbors = k_neighbors
        self.tau = tau
        self.lambda_lwf = lambda_lwf
        self.random_state = random_state

    def _train_config(self):
        if self.loss == "joint":
            raise InvalidArgumentError("the joint bound needs all tasks at once; use fit on the pooled data")
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, n_points=self.n_points,
            backbone=self.backbone, widths=None if self.widths is None else list(self.widths),
            aggregation=self.aggregation, k_neighbors=self.k_neighbors,
            seed=int(self.random_state),
            loss=DistillConfig(tau=self.tau, lambda_lwf=self.lambda_lwf, loss_kind=self.loss),
        ).validate()

    def _task(self, X, y, index):
        X = check_point_clouds(X)
        y = check_task_labels(y, len(X))
        classes = [int(c) for c in np.unique(y)]
        split = PointSet(X, y, [f"fit:{index}:{i}" for i in range(len(y))])
        return TaskDataset(index, classes, split, None)

    def fit(self, X, y):
        """Start over and learn the classes in ``y`` as the first task."""
        config = self._train_config()
        self.state_ = start_run(self._task(X, y, 0), config)
        self._sync()
        return self

    def partial_fit(self, X, y):
        """Learn a new task; its classes must all be unseen so far."""
        if not hasattr(self, "state_"):
            return self.fit(X, y)
        config = self._train_config()
        task = self._task(X, y, self.state_.task_index + 1)
        self.state_ = advance_task(self.state_, task, config)
        self._sync()
        return self

    def _sync(self):
        self.classes_ = np.array(self.state_.mapper.classes, dtype=np.int64)
        self.n_tasks_ = self.state_.task_index + 1
        self.task_sizes_ = list(self.state_.task_sizes)
        self.loss_curve_ = list(self.state_.student.loss_history)

    @property
    def model_(self):
        check_is_fitted(self, "state_")
        return self.state_.student

    def decision_function(self, X):
        check_is_fitted(self, "state_")
        return predict_logits(self.model_, check_point_clouds(X))

    def predict_proba(self, X):
        return _softmax_np(self.decision_function(X))

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def transform(self, X):
        """Global feature vector of every cloud."""
        check_is_fitted(self, "state_")
        X = check_point_clouds(X)
        with no_grad():
            return np.concatenate([self.model_.features(X[i: i + 64]).data
                                   for i in range(0, len(X), 64)])
