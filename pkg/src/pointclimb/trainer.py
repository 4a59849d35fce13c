"""Base-task training, teacher/student incremental steps and the joint bound."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .backbones import BACKBONES, DEFAULT_WIDTHS, ModelState, build_model, expand_head
from .data import LabelMapper, PointSet, TaskDataset, subsample_points
from .exceptions import InvalidArgumentError, InvalidStateError
from .losses import DistillConfig, census_context, census_loss, class_loss, lwf_loss
from .tensor import Adam, backward, no_grad

logger = logging.getLogger(__name__)

# rng stream purposes, combined with (seed, task index)
_BATCH_ORDER = 10
_TRAIN_POINTS = 11
_TEST_POINTS = 12


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-4
    n_points: int = 1024
    backbone: str = "pointnet_lite"
    widths: list = None
    aggregation: str = "max"
    k_neighbors: int = 8
    seed: int = 0
    optimizer: str = "adam"
    loss: DistillConfig = field(default_factory=DistillConfig)

    def validate(self):
        for name in ("batch_size", "n_points"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.epochs < 0:
            raise InvalidArgumentError("epochs must be non-negative")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be positive")
        if self.backbone not in BACKBONES:
            raise InvalidArgumentError(f"backbone must be one of {BACKBONES}")
        if self.optimizer != "adam":
            raise InvalidArgumentError("only the adam optimizer is supported")
        self.loss.validate()
        return self

    @property
    def layer_widths(self):
        return list(DEFAULT_WIDTHS[self.backbone] if self.widths is None else self.widths)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = self.layer_widths
        return d

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        loss = DistillConfig(**doc.pop("loss", {}))
        return cls(loss=loss, **doc)


def desk_config(**overrides):
    """Small settings that train in seconds on a CPU.

    The full-scale settings are the :class:`TrainConfig` defaults.
    """
    cfg = TrainConfig(epochs=10, batch_size=16, n_points=128, lr=3e-3)
    loss = overrides.pop("loss", None)
    cfg = replace(cfg, **overrides)
    if "widths" not in overrides:
        cfg.widths = [w // 2 for w in DEFAULT_WIDTHS[cfg.backbone]]
    if loss is not None:
        cfg.loss = loss
    return cfg


@dataclass
class RunState:
    task_index: int
    student: ModelState
    mapper: LabelMapper
    task_sizes: list
    teacher: ModelState = None
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _rng(config, purpose, task_index):
    return np.random.default_rng([int(config.seed), purpose, int(task_index)])


def eval_points(split, config, task_index):
    """The fixed evaluation subsample of a test split."""
    return subsample_points(split.points, config.n_points, _rng(config, _TEST_POINTS, task_index))


def _fit(student, split, mapper, config, task_index, loss_fn, teacher=None):
    """Adam over shuffled mini-batches; returns the mean loss of every epoch."""
    params = student.parameters()
    opt = Adam(params, lr=config.lr)
    labels = mapper.to_index(split.labels)
    order_rng = _rng(config, _BATCH_ORDER, task_index)
    points_rng = _rng(config, _TRAIN_POINTS, task_index)
    epoch_losses = []
    for epoch in range(config.epochs):
        pts = subsample_points(split.points, config.n_points, points_rng)
        perm = order_rng.permutation(len(labels))
        total = 0.0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start: start + config.batch_size]
            xb = pts[idx]
            t_logits = None
            if teacher is not None:
                with no_grad():
                    t_logits = teacher.forward(xb).data
            loss = loss_fn(student.forward(xb), labels[idx], t_logits)
            backward(loss, params)
            opt.step()
            total += loss.item() * len(idx)
        epoch_losses.append(total / len(perm))
        logger.debug("task %d epoch %d loss %.5f", task_index, epoch, epoch_losses[-1])
    return epoch_losses


def _new_model(config, class_ids):
    return build_model(config.backbone, class_ids, config.layer_widths, config.aggregation,
                       config.k_neighbors, config.seed)


def _train_from_scratch(split, class_ids, config, task_index):
    if len(split) == 0:
        raise InvalidArgumentError("empty training set")
    mapper = LabelMapper(class_ids)
    model = _new_model(config, mapper.classes)
    model.loss_history = _fit(model, split, mapper, config, task_index,
                              lambda logits, y, _: class_loss(logits, y))
    return model, mapper


def train_base(task, config):
    """Train the first task with cross-entropy only."""
    config.validate()
    model, _ = _train_from_scratch(task.train, task.classes, config, task.task_index)
    return model


def start_run(task, config):
    model, mapper = _train_from_scratch(task.train, task.classes, config.validate(), task.task_index)
    return RunState(task.task_index, model, mapper, [len(task.classes)],
                    history=[model.loss_history])


def advance_task(state, task, config):
    """Freeze the current student as teacher and train an expanded copy on ``task``.

    Only ``task.train`` is read; earlier tasks' data is never touched.
    """
    config.validate()
    kind = config.loss.loss_kind
    if kind == "joint":
        raise InvalidArgumentError("the joint bound is trained with train_joint, not advance_task")
    overlap = set(task.classes) & set(state.mapper.classes)
    if overlap:
        raise InvalidArgumentError(f"task classes already seen: {sorted(overlap)}")
    if len(task.train) == 0:
        raise InvalidArgumentError("empty training set")

    teacher = state.student
    teacher.role = "teacher"
    teacher.freeze()
    student = teacher.clone(role="student")
    student.head = expand_head(student.head, task.classes, config.seed)
    mapper = state.mapper.extend(task.classes)
    sizes = state.task_sizes + [len(task.classes)]
    t = state.task_index + 1
    if student.head.class_slots != mapper.classes:
        raise InvalidStateError("head columns out of sync with the label mapper")

    if kind == "ft":
        def loss_fn(s, y, _):
            return class_loss(s, y)
    elif kind == "lwf":
        def loss_fn(s, y, o):
            return lwf_loss(o, s, y, config.loss)
    else:
        ctx = census_context(t, sizes, config.loss)
        logger.debug("census weight %.1f at task %d", ctx.weight, t)

        def loss_fn(s, y, o):
            return census_loss(o, s, y, config.loss, ctx)

    losses = _fit(student, task.train, mapper, config, t, loss_fn, teacher=teacher)
    student.loss_history = losses
    return RunState(t, student, mapper, sizes, teacher, state.history + [losses],
                    list(state.checkpoints))


def train_joint(tasks, config):
    """Upper bound: one model trained from scratch on the pooled tasks."""
    config.validate()
    tasks = list(tasks)
    if not tasks:
        raise InvalidArgumentError("no tasks to pool")
    split = PointSet.concat([t.train for t in tasks])
    classes = [c for t in tasks for c in t.classes]
    model, _ = _train_from_scratch(split, classes, config, tasks[-1].task_index)
    return model


def predict_logits(model, points, batch_size=64):
    with no_grad():
        out = [model.forward(points[i: i + batch_size]).data
               for i in range(0, len(points), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.head.num_classes))


__all__ = ["TrainConfig", "RunState", "TaskDataset", "desk_config", "train_base", "start_run",
           "advance_task", "train_joint", "predict_logits", "eval_points"]
