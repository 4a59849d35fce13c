"""Veristic task sampling: random class-incremental scenarios.

All randomness comes from numpy's PCG64 generator. The class shuffle and the
task-size draws use two independent child streams of one ``SeedSequence``, so
:func:`sample_task_sizes` and :func:`build_scenario` agree for a given seed.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgumentError

SCENARIO_SHAPES = {
    "20+5x4": [20, 5, 5, 5, 5],
    "10+5x6": [10, 5, 5, 5, 5, 5, 5],
    "4x10": [4] * 10,
}


@dataclass(frozen=True)
class SamplerConfig:
    tc: int
    low: int
    high: int
    seed: int = 0

    def validate(self):
        for name in ("tc", "low", "high", "seed"):
            if not isinstance(getattr(self, name), (int, np.integer)):
                raise InvalidArgumentError(f"{name} must be an integer")
        if not 1 <= self.low <= self.high <= self.tc:
            raise InvalidArgumentError(
                f"require 1 <= low <= high <= tc, got low={self.low} high={self.high} tc={self.tc}")
        return self


@dataclass
class Scenario:
    tasks: list
    seed: int = 0

    @property
    def sizes(self):
        return [len(t) for t in self.tasks]

    @property
    def cumulative(self):
        """Classes seen after each task."""
        return [int(x) for x in np.cumsum(self.sizes)]

    @property
    def num_tasks(self):
        return len(self.tasks)

    def classes_up_to(self, t):
        return [c for task in self.tasks[: t + 1] for c in task]

    def to_dict(self):
        return {"seed": int(self.seed), "sizes": self.sizes,
                "tasks": [[int(c) for c in t] for t in self.tasks]}

    @classmethod
    def from_dict(cls, doc):
        tasks = [[int(c) for c in t] for t in doc["tasks"]]
        if "sizes" in doc and list(doc["sizes"]) != [len(t) for t in tasks]:
            raise InvalidArgumentError("scenario sizes do not match tasks")
        flat = [c for t in tasks for c in t]
        if len(set(flat)) != len(flat):
            raise InvalidArgumentError("scenario tasks overlap")
        return cls(tasks, int(doc.get("seed", 0)))

    def save(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _streams(seed):
    shuffle_ss, sizes_ss = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.Generator(np.random.PCG64(shuffle_ss)), np.random.Generator(np.random.PCG64(sizes_ss))


def _draw_sizes(rng, tc, low, high):
    sizes = []
    condition = 0
    while tc != 0 and condition >= 0:
        base = int(rng.integers(low, high, endpoint=True))
        condition = tc - base
        if condition <= 0:
            sizes.append(tc)
            break
        sizes.append(base)
        tc = condition
    return sizes


def sample_task_sizes(config):
    """Task sizes drawn from ``[low, high]``; a short remainder becomes the last task."""
    config.validate()
    _, rng = _streams(config.seed)
    return _draw_sizes(rng, config.tc, config.low, config.high)


def _slice(classes, sizes):
    tasks, offset = [], 0
    for size in sizes:
        tasks.append([int(c) for c in classes[offset: offset + size]])
        offset += size
    return tasks


def build_scenario(config):
    config.validate()
    shuffle_rng, size_rng = _streams(config.seed)
    classes = shuffle_rng.permutation(config.tc)
    sizes = _draw_sizes(size_rng, config.tc, config.low, config.high)
    return Scenario(_slice(classes, sizes), int(config.seed))


def fixed_scenario(sizes, seed=0, num_classes=40):
    """Shuffle ``num_classes`` classes and cut the first ``sum(sizes)`` into tasks."""
    sizes = [int(s) for s in sizes]
    if not sizes or any(s < 1 for s in sizes):
        raise InvalidArgumentError("task sizes must be positive")
    if sum(sizes) > num_classes:
        raise InvalidArgumentError(f"sizes sum to {sum(sizes)} but only {num_classes} classes exist")
    shuffle_rng, _ = _streams(seed)
    classes = shuffle_rng.permutation(num_classes)
    return Scenario(_slice(classes, sizes), int(seed))
