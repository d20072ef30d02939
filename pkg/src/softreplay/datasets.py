"""Task sequences: synthetic Gaussian class clusters and file-based splits.

A task sequence partitions the class set into contiguous, ascending groups
(classes 0..k-1 form task 0, and so on).  File loaders accept two formats:

* IDX: 2 zero bytes, dtype code 0x08 (unsigned byte), ndim, then big-endian
  uint32 dimension sizes, then raw pixel/label bytes.  Images and labels are
  separate files given as one ``images,labels`` path argument; pixels are
  scaled to [0, 1] by dividing by 255.
* CSV: header row ``label,f0,f1,...``; one example per row.  Feature values
  are used as-is (assumed preprocessed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, ShapeError

Array = np.ndarray


@dataclass
class TaskSpec:
    task_id: int
    class_ids: list[int]
    train_x: Array
    train_y: Array
    test_x: Array
    test_y: Array


@dataclass
class TaskSequence:
    tasks: list[TaskSpec]
    num_classes: int
    protocol: str = "online"
    epochs_per_task: int = 1

    def __post_init__(self):
        if self.protocol not in ("online", "offline"):
            raise ShapeError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "online":
            self.epochs_per_task = 1
        seen: set[int] = set()
        for task in self.tasks:
            ids = set(task.class_ids)
            if ids & seen:
                raise ShapeError(f"task {task.task_id} reuses classes {ids & seen}")
            seen |= ids
            for y in (task.train_y, task.test_y):
                if not set(np.unique(y)).issubset(ids):
                    raise ShapeError(f"task {task.task_id} has labels outside its classes")
        if seen != set(range(self.num_classes)):
            raise ShapeError("task classes do not cover the class range")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)


def onehot(y: Array, num_classes: int) -> Array:
    y = np.asarray(y, dtype=np.int64)
    return np.eye(num_classes)[y]


def _partition(xs: Array, ys: Array, num_classes: int, classes_per_task: int,
               test_xs: Array, test_ys: Array) -> list[TaskSpec]:
    tasks = []
    for t, start in enumerate(range(0, num_classes, classes_per_task)):
        ids = list(range(start, start + classes_per_task))
        tr = np.isin(ys, ids)
        te = np.isin(test_ys, ids)
        tasks.append(TaskSpec(task_id=t, class_ids=ids,
                              train_x=xs[tr], train_y=ys[tr],
                              test_x=test_xs[te], test_y=test_ys[te]))
    return tasks


def make_synthetic_tasks(num_classes: int, classes_per_task: int, dim: int,
                         cluster_separation: float, n_train_per_class: int,
                         n_test_per_class: int, seed: int,
                         protocol: str = "online",
                         epochs_per_task: int = 1) -> TaskSequence:
    """Unit-variance Gaussian clusters with seeded means on a sphere of the
    given radius; classes are assigned to tasks in index order."""
    if num_classes % classes_per_task != 0:
        raise ShapeError(f"{num_classes} classes are not divisible into "
                         f"tasks of {classes_per_task}")
    if dim < 2:
        raise ShapeError("dim must be >= 2")
    if cluster_separation < 0:
        raise ShapeError("cluster_separation must be >= 0")
    rng = np.random.default_rng(seed)
    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(num_classes):
        direction = rng.normal(size=dim)
        mu = cluster_separation * direction / np.linalg.norm(direction)
        train_x.append(mu + rng.normal(size=(n_train_per_class, dim)))
        train_y.append(np.full(n_train_per_class, c, dtype=np.int64))
        test_x.append(mu + rng.normal(size=(n_test_per_class, dim)))
        test_y.append(np.full(n_test_per_class, c, dtype=np.int64))
    tasks = _partition(np.concatenate(train_x), np.concatenate(train_y),
                       num_classes, classes_per_task,
                       np.concatenate(test_x), np.concatenate(test_y))
    return TaskSequence(tasks, num_classes, protocol, epochs_per_task)


# ------------------------------------------------------------------ IDX files

def _read_idx(path: Path) -> Array:
    raw = path.read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header at byte offset 0")
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad IDX magic at byte offset 0")
    if raw[2] != 0x08:
        raise FormatError(f"{path}: unsupported IDX dtype code at byte offset 2")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dims at byte offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    data = np.frombuffer(raw, dtype=np.uint8, offset=header)
    expected = int(np.prod(dims))
    if data.size != expected:
        raise FormatError(f"{path}: payload at byte offset {header} has "
                          f"{data.size} bytes, expected {expected}")
    return data.reshape(dims)


def _load_idx_pair(path_pair: str) -> tuple[Array, Array]:
    parts = [p.strip() for p in path_pair.split(",")]
    if len(parts) != 2:
        raise FormatError("IDX paths must be given as 'images_file,labels_file'")
    images = _read_idx(Path(parts[0]))
    labels = _read_idx(Path(parts[1]))
    if labels.ndim != 1:
        raise FormatError(f"{parts[1]}: labels must be one-dimensional")
    if images.shape[0] != labels.shape[0]:
        raise FormatError("image and label counts differ")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


# ------------------------------------------------------------------ CSV files

def _load_csv(path: str) -> tuple[Array, Array]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("label"):
        raise FormatError(f"{path}: expected header starting with 'label'")
    n_cols = len(lines[0].split(","))
    ys, xs = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != n_cols:
            raise FormatError(f"{path}: line {lineno} has {len(cells)} columns, "
                              f"expected {n_cols}")
        ys.append(int(float(cells[0])))
        xs.append([float(c) for c in cells[1:]])
    return np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64)


def save_csv(path, x: Array, y: Array) -> None:
    """Writes features with shortest round-trip float formatting, so a
    save/load cycle reproduces values exactly."""
    x = np.asarray(x, dtype=np.float64)
    header = "label," + ",".join(f"f{i}" for i in range(x.shape[1]))
    rows = [header]
    for label, feats in zip(y, x):
        rows.append(f"{int(label)}," + ",".join(repr(float(v)) for v in feats))
    Path(path).write_text("\n".join(rows) + "\n")


def load_split_image_dataset(train_path: str, test_path: str, fmt: str,
                             num_tasks: int, protocol: str = "online",
                             epochs_per_task: int = 1) -> TaskSequence:
    if fmt == "idx":
        train_x, train_y = _load_idx_pair(train_path)
        test_x, test_y = _load_idx_pair(test_path)
    elif fmt == "csv":
        train_x, train_y = _load_csv(train_path)
        test_x, test_y = _load_csv(test_path)
    else:
        raise FormatError(f"unknown dataset format {fmt!r}")
    classes = sorted(int(c) for c in np.unique(train_y))
    if classes != list(range(len(classes))):
        remap = {c: i for i, c in enumerate(classes)}
        train_y = np.array([remap[int(c)] for c in train_y], dtype=np.int64)
        test_y = np.array([remap[int(c)] for c in test_y], dtype=np.int64)
    num_classes = len(classes)
    if num_classes % num_tasks != 0:
        raise ShapeError(f"{num_classes} classes are not divisible into "
                         f"{num_tasks} tasks")
    tasks = _partition(train_x, train_y, num_classes, num_classes // num_tasks,
                       test_x, test_y)
    return TaskSequence(tasks, num_classes, protocol, epochs_per_task)


# ------------------------------------------------------------------ iteration

def iterate(seq: TaskSequence, task_id: int, batch_size: int,
            rng: np.random.Generator) -> Iterator[tuple[Array, Array]]:
    """Shuffled batches over one task's training data.  Online: a single
    pass including the final partial batch; offline: epochs_per_task passes,
    reshuffled each epoch."""
    if not 0 <= task_id < seq.num_tasks:
        raise ShapeError(f"task_id {task_id} out of range")
    task = seq.tasks[task_id]
    n = task.train_x.shape[0]
    epochs = 1 if seq.protocol == "online" else seq.epochs_per_task
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield task.train_x[idx], task.train_y[idx]
