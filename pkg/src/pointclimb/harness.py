"""Union-of-seen-classes evaluation, accuracy bookkeeping and report emission."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .backbones import save_checkpoint
from .data import PointSet, TaskDataset
from .exceptions import InvalidArgumentError, InvalidStateError
from .trainer import advance_task, eval_points, predict_logits, start_run, train_joint

METHOD_ORDER = ("joint", "ft", "lwf", "census")
METHOD_LABELS = {"joint": "Joint", "ft": "FT", "lwf": "LwF", "census": "Census"}


@dataclass
class AccuracyMatrix:
    """``union[t]``: accuracy over tasks ``0..t`` after training task ``t``.

    ``breakdown[t][j]`` is the accuracy on task ``j``'s test classes at that
    point and ``counts[t][j]`` the number of test samples behind it.
    """

    union: list = field(default_factory=list)
    breakdown: list = field(default_factory=list)
    counts: list = field(default_factory=list)

    def append(self, union, breakdown, counts):
        self.union.append(float(union))
        self.breakdown.append([float(b) for b in breakdown])
        self.counts.append([int(c) for c in counts])

    def __len__(self):
        return len(self.union)

    def to_dict(self):
        return {"union": self.union, "breakdown": self.breakdown, "counts": self.counts}

    @classmethod
    def from_dict(cls, doc):
        return cls(list(doc["union"]), [list(r) for r in doc.get("breakdown", [])],
                   [list(r) for r in doc.get("counts", [])])


def evaluate_union(model, test_sets):
    """Top-1 accuracy over every class the head knows.

    ``test_sets`` holds one :class:`PointSet` per task seen so far, in task
    order. Returns ``(union_accuracy, per_task_accuracy, per_task_counts)``.
    """
    slots = model.head.class_slots
    index = {c: i for i, c in enumerate(slots)}
    seen = set()
    for s in test_sets:
        seen.update(int(c) for c in np.unique(s.labels))
    if not seen <= set(index):
        raise InvalidStateError(f"head lacks classes {sorted(seen - set(index))}")
    hits, counts = [], []
    for s in test_sets:
        if len(s) == 0:
            hits.append(0)
            counts.append(0)
            continue
        logits = predict_logits(model, s.points)
        pred = np.argmax(logits, axis=1)
        target = np.array([index[int(c)] for c in s.labels])
        hits.append(int((pred == target).sum()))
        counts.append(len(s))
    total = sum(counts)
    per_task = [h / c if c else 0.0 for h, c in zip(hits, counts)]
    return (sum(hits) / total if total else 0.0), per_task, counts


def forgetting_measure(matrix):
    """Per-task drop from the best accuracy to the final one.

    Covers every task except the last; a single-task run gives ``[]``.
    """
    b = matrix.breakdown
    if not b:
        raise InvalidArgumentError("accuracy matrix has no per-task breakdown")
    last = len(b) - 1
    return [max(b[t][j] for t in range(j, last + 1)) - b[last][j] for j in range(last)]


def _eval_sets(provider, config, t):
    out = []
    for j in range(t + 1):
        s = provider.test_split(j)
        out.append(PointSet(eval_points(s, config, j), s.labels, s.source_ids))
    return out


def run_scenario(provider, config, checkpoint_dir=None):
    """Train through every task of ``provider`` under ``config.loss.loss_kind``.

    Incremental regimes read only the current task's training split. The
    joint bound is retrained from scratch on the pooled data at each task.
    """
    config.validate()
    matrix = AccuracyMatrix()
    state = None
    for t in range(len(provider)):
        if config.loss.loss_kind == "joint":
            pooled = [TaskDataset(j, provider.classes(j), provider.train_split(j), None)
                      for j in range(t + 1)]
            model = train_joint(pooled, config)
        else:
            task = TaskDataset(t, provider.classes(t), provider.train_split(t), None)
            state = start_run(task, config) if t == 0 else advance_task(state, task, config)
            model = state.student
        matrix.append(*evaluate_union(model, _eval_sets(provider, config, t)))
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
            path = os.path.join(checkpoint_dir, f"task{t}.json")
            save_checkpoint(model, path, extra={"task": t, "seed": config.seed,
                                                "loss": config.loss.loss_kind})
            if state is not None:
                state.checkpoints.append(path)
    return state, matrix


# aggregation ----------------------------------------------------------------

def _std(values, ddof):
    return float(np.std(values, ddof=ddof)) if len(values) > ddof else 0.0


def aggregate(runs, sample_std=False):
    """Mean and standard deviation per (backbone, loss, task column).

    ``runs`` maps ``(backbone, loss)`` to a list of per-seed AccuracyMatrix.
    The population deviation is used unless ``sample_std`` is set.
    """
    if not runs:
        raise InvalidArgumentError("no runs to aggregate")
    lengths = {len(m) for ms in runs.values() for m in ms}
    if len(lengths) != 1:
        raise InvalidArgumentError(f"runs disagree on the number of tasks: {sorted(lengths)}")
    rows = []
    for (backbone, loss) in _ordered_keys(runs):
        mats = runs[(backbone, loss)]
        acc = np.array([m.union for m in mats])
        columns = [{"task": t, "mean": float(acc[:, t].mean()),
                    "std": _std(acc[:, t], 1 if sample_std else 0)}
                   for t in range(acc.shape[1])]
        rows.append({"backbone": backbone, "loss": loss, "columns": columns})
    return rows


def _ordered_keys(runs):
    def key(k):
        backbone, loss = k
        return (backbone, METHOD_ORDER.index(loss) if loss in METHOD_ORDER else len(METHOD_ORDER), loss)
    return sorted(runs, key=key)


def rank_columns(rows):
    """1 = best and 2 = second best mean per (backbone, task column); ties share the rank."""
    ranks = {}
    for backbone in sorted({r["backbone"] for r in rows}):
        group = [r for r in rows if r["backbone"] == backbone]
        for t in range(len(group[0]["columns"])):
            means = sorted({r["columns"][t]["mean"] for r in group}, reverse=True)
            for r in group:
                m = r["columns"][t]["mean"]
                pos = means.index(m) + 1
                if pos <= 2:
                    ranks[(backbone, r["loss"], t)] = pos
    return ranks


def format_table(rows, sizes):
    """Aligned text table: one row per (backbone, loss), ``mean±std`` in percent.

    Column headers are cumulative class counts. ``**`` marks the best
    mean of a column within a backbone and ``*`` the second best.
    """
    ranks = rank_columns(rows)
    header = ["Backbone", "Loss"] + [str(n) for n in np.cumsum(sizes)]
    body = []
    for r in rows:
        cells = [r["backbone"], METHOD_LABELS.get(r["loss"], r["loss"])]
        for t, col in enumerate(r["columns"]):
            mark = {1: "**", 2: "*"}.get(ranks.get((r["backbone"], r["loss"], t)), "")
            cells.append(f"{100 * col['mean']:.2f}±{100 * col['std']:.2f}{mark}")
        body.append(cells)
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in body]
    return "\n".join(lines) + "\n"


def format_csv(rows, sizes):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["backbone", "loss"] + [f"task{t}_{k}" for t in range(len(sizes))
                                            for k in ("mean", "std")])
    for r in rows:
        writer.writerow([r["backbone"], r["loss"]] +
                        [repr(c[k]) for c in r["columns"] for k in ("mean", "std")])
    return buf.getvalue()


def _write_atomic(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def aggregate_and_emit(runs, out_dir, sizes, scenarios=None, seeds=None, config=None,
                       formats=("json", "csv", "table"), sample_std=False):
    """Write ``results.json``, ``results.csv`` and ``table.txt`` into ``out_dir``.

    ``scenarios`` maps seed to the scenario dict used for that seed; it and
    ``config`` are embedded in the JSON bundle for provenance.
    """
    rows = aggregate(runs, sample_std)
    if len(sizes) != len(rows[0]["columns"]):
        raise InvalidArgumentError("scenario sizes do not match the accuracy columns")
    os.makedirs(out_dir, exist_ok=True)
    doc = {
        "scenario": {"sizes": list(sizes),
                     "per_seed": {str(k): v for k, v in sorted((scenarios or {}).items())}},
        "seeds": list(seeds or []),
        "std": "sample" if sample_std else "population",
        "runs": rows,
        "raw": [{"backbone": b, "loss": l, "matrices": [m.to_dict() for m in runs[(b, l)]]}
                for b, l in _ordered_keys(runs)],
        "config": config,
    }
    written = {}
    if "json" in formats:
        written["json"] = os.path.join(out_dir, "results.json")
        _write_atomic(written["json"], json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if "csv" in formats:
        written["csv"] = os.path.join(out_dir, "results.csv")
        _write_atomic(written["csv"], format_csv(rows, sizes))
    if "table" in formats:
        written["table"] = os.path.join(out_dir, "table.txt")
        _write_atomic(written["table"], format_table(rows, sizes))
    return doc, written
