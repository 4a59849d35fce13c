"""Classification, distillation, LwF and Census objectives over logits."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import InvalidArgumentError
from .tensor import Tensor, as_tensor, log_softmax, nll, take, _softmax_np

LOSS_KINDS = ("joint", "ft", "lwf", "census")


@dataclass
class DistillConfig:
    """``eta_mode`` picks the Census class count: ``"task"`` uses the current
    task's classes, ``"cumulative"`` all classes seen so far. ``elapsed_mode``
    picks T: ``"elapsed"`` counts completed tasks (first incremental task has
    T=1), ``"current"`` uses the 1-based index of the current task.
    """

    tau: float = 2.0
    lambda_lwf: float = 1.0
    loss_kind: str = "census"
    eta_mode: str = "task"
    elapsed_mode: str = "elapsed"

    def validate(self):
        if not self.tau > 0:
            raise InvalidArgumentError(f"tau must be positive, got {self.tau}")
        if self.lambda_lwf < 0:
            raise InvalidArgumentError("lambda_lwf must be non-negative")
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidArgumentError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.eta_mode not in ("task", "cumulative"):
            raise InvalidArgumentError("eta_mode must be 'task' or 'cumulative'")
        if self.elapsed_mode not in ("elapsed", "current"):
            raise InvalidArgumentError("elapsed_mode must be 'elapsed' or 'current'")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class CensusContext:
    eta: int
    tasks_elapsed: int

    @property
    def weight(self):
        if self.eta < 1 or self.tasks_elapsed < 1:
            raise InvalidArgumentError("Census context needs eta >= 1 and tasks_elapsed >= 1")
        return float(self.eta * self.tasks_elapsed)


def census_context(task_index, task_sizes, config):
    """Context for 0-based ``task_index`` (the base task is index 0)."""
    eta = task_sizes[task_index] if config.eta_mode == "task" else sum(task_sizes[: task_index + 1])
    elapsed = task_index if config.elapsed_mode == "elapsed" else task_index + 1
    return CensusContext(int(eta), int(elapsed))


def _constant(x):
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def class_loss(student_logits, labels):
    """Mean cross-entropy against integer logit indices, at temperature 1."""
    student_logits = as_tensor(student_logits)
    labels = np.asarray(labels)
    if student_logits.ndim != 2:
        raise InvalidArgumentError("student logits must be [N, M]")
    if labels.size and (labels.min() < 0 or labels.max() >= student_logits.shape[1]):
        raise InvalidArgumentError(f"labels must lie in [0, {student_logits.shape[1]})")
    return nll(log_softmax(student_logits, 1.0), labels)


def distill_loss(teacher_logits, student_logits, tau=2.0):
    """Soft cross-entropy of the student's old-class slice against the teacher.

    The teacher distribution is a constant: no gradient reaches the teacher.
    """
    teacher = _constant(teacher_logits)
    student_logits = as_tensor(student_logits)
    if teacher.ndim != 2 or student_logits.ndim != 2:
        raise InvalidArgumentError("logits must be [N, M]")
    n, m_old = teacher.shape
    if student_logits.shape[0] != n:
        raise InvalidArgumentError("teacher and student batch sizes differ")
    if student_logits.shape[1] < m_old:
        raise InvalidArgumentError(
            f"student has {student_logits.shape[1]} columns, teacher {m_old}")
    if not tau > 0:
        raise InvalidArgumentError("tau must be positive")
    target = _softmax_np(teacher / tau)
    old = take(student_logits, (slice(None), slice(0, m_old)))
    log_s = log_softmax(old, tau)
    return -((log_s * target).sum(axis=1)).mean()


def mean_entropy(teacher_logits, tau=2.0):
    """Mean entropy of the softened teacher distribution (a float)."""
    p = _softmax_np(_constant(teacher_logits) / tau)
    logp = np.log(np.where(p > 0, p, 1.0))
    return float(-(p * logp).sum(axis=1).mean())


def lwf_loss(teacher_logits, student_logits, labels, config):
    return config.lambda_lwf * distill_loss(teacher_logits, student_logits, config.tau) + \
        class_loss(student_logits, labels)


def census_loss(teacher_logits, student_logits, labels, config, ctx):
    return class_loss(student_logits, labels) + \
        ctx.weight * distill_loss(teacher_logits, student_logits, config.tau)
