"""Accuracy-matrix bookkeeping and the ACC / forgetting metrics.

Entry (t, k) of the matrix is the percent accuracy on task t's test set
after training task k; entries with t > k stay undefined.  ACC is the mean
of the final column; the forgetting measure is the mean gap between each
task's running best and its final accuracy (the best includes the final
column, so forgetting is never negative).

Evaluation is class-incremental: argmax over all class logits, no task
oracle, ties broken toward the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

Array = np.ndarray


class AccuracyMatrix:
    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise ShapeError("need at least one task")
        self.num_tasks = num_tasks
        self.entries = np.full((num_tasks, num_tasks), np.nan)

    def record(self, task: int, after: int, percent: float) -> None:
        if task > after:
            raise ShapeError(f"entry ({task}, {after}) lies below the diagonal")
        if not 0.0 <= percent <= 100.0:
            raise ShapeError(f"accuracy {percent} outside [0, 100]")
        self.entries[task, after] = percent

    def best(self, task: int) -> float:
        row = self.entries[task]
        return float(np.nanmax(row))

    def final_column_complete(self) -> bool:
        return not np.any(np.isnan(self.entries[:, -1]))

    def row_after(self, k: int) -> Array:
        """A_{t,k} for t <= k."""
        return self.entries[: k + 1, k].copy()


def task_accuracy(classifier, x: Array, y: Array) -> float:
    """Percent accuracy via argmax over all classes (lowest index on ties)."""
    pred = classifier.logits(x).argmax(axis=1)
    return 100.0 * float((pred == y).mean())


def evaluate_task_row(classifier, seq, k: int, matrix: AccuracyMatrix) -> AccuracyMatrix:
    for t in range(k + 1):
        task = seq.tasks[t]
        matrix.record(t, k, task_accuracy(classifier, task.test_x, task.test_y))
    return matrix


def compute_acc(matrix: AccuracyMatrix) -> float:
    """Mean final-column accuracy, in percent."""
    if not matrix.final_column_complete():
        raise ShapeError("final column incomplete; train all tasks first")
    return float(matrix.entries[:, -1].mean())


def compute_fm(matrix: AccuracyMatrix) -> float:
    """Mean over tasks of (best accuracy ever - final accuracy), in percent."""
    if not matrix.final_column_complete():
        raise ShapeError("final column incomplete; train all tasks first")
    best = np.nanmax(matrix.entries, axis=1)
    return float((best - matrix.entries[:, -1]).mean())


def confusion_matrix(classifier, seq) -> Array:
    """Counts indexed (true class, predicted class) over all test sets."""
    c = seq.num_classes
    counts = np.zeros((c, c), dtype=np.int64)
    for task in seq.tasks:
        pred = classifier.logits(task.test_x).argmax(axis=1)
        for true, p in zip(task.test_y, pred):
            counts[true, p] += 1
    return counts


def class_probability_profile(classifier, seq) -> Array:
    """Row c is the mean predicted distribution over class-c test examples."""
    c = seq.num_classes
    profile = np.zeros((c, c))
    for task in seq.tasks:
        probs = classifier.probs(task.test_x)
        for cls in task.class_ids:
            mask = task.test_y == cls
            if mask.any():
                profile[cls] = probs[mask].mean(axis=0)
    return profile


def new_class_bias(profile: Array, final_task_classes: list[int],
                   old_classes: list[int]) -> bool:
    """True when every old class row places more mass on the final task's
    classes than on its own true class."""
    for cls in old_classes:
        new_mass = profile[cls, final_task_classes].sum()
        if new_mass <= profile[cls, cls]:
            return False
    return True


@dataclass
class MetricsReport:
    acc: float
    fm: float
    per_task_final: list[float]
    confusion: Array
    class_prob_profiles: Array


def build_report(classifier, seq, matrix: AccuracyMatrix) -> MetricsReport:
    return MetricsReport(
        acc=compute_acc(matrix),
        fm=compute_fm(matrix),
        per_task_final=[float(v) for v in matrix.entries[:, -1]],
        confusion=confusion_matrix(classifier, seq),
        class_prob_profiles=class_probability_profile(classifier, seq),
    )
