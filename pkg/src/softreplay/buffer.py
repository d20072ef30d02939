"""Fixed-capacity reservoir-sampled replay memory.

Every stream item is offered once; after the buffer fills, the offered item
lands in a uniformly chosen slot with probability capacity/(seen+1), which
keeps each of the N items seen so far stored with probability capacity/N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBufferError, ShapeError

Array = np.ndarray


@dataclass
class BufferItem:
    x: Array
    y_onehot: Array
    stored_logits: Array | None = None
    stream_index: int = -1
    task_id: int = -1


@dataclass
class ReplayBatch:
    """A sampled buffer minibatch packed into arrays."""
    x: Array
    y_onehot: Array
    logits: Array | None
    stream_index: Array
    task_id: Array


class MemoryBuffer:
    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ShapeError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self.items: list = []
        self.seen = 0

    def __len__(self) -> int:
        return len(self.items)

    def clear(self) -> None:
        """Empty the buffer; the generator keeps streaming."""
        self.items = []
        self.seen = 0

    def reservoir_insert(self, item) -> None:
        if isinstance(item, BufferItem) and item.stream_index < 0:
            item.stream_index = self.seen
        if self.seen < self.capacity:
            self.items.append(item)
        else:
            slot = int(self.rng.integers(0, self.seen + 1))
            if slot < self.capacity:
                self.items[slot] = item
        self.seen += 1

    def sample_minibatch(self, b: int, rng: np.random.Generator | None = None) -> list:
        """b items, without replacement when they fit, with replacement when
        b exceeds the buffer; deterministic under the generator's state."""
        if not self.items:
            raise EmptyBufferError("cannot sample from an empty buffer")
        if b < 1:
            raise ShapeError("minibatch size must be >= 1")
        rng = self.rng if rng is None else rng
        n = len(self.items)
        idx = rng.choice(n, size=b, replace=b > n)
        return [self.items[i] for i in idx]

    def update_stored_logits(self, classifier) -> None:
        """Fill logits for items inserted without them; never overwrites, so
        each item keeps the logits observed at its insertion."""
        missing = [item for item in self.items if item.stored_logits is None]
        if not missing:
            return
        x = np.stack([item.x for item in missing])
        z = classifier.logits(x)
        for item, row in zip(missing, z):
            item.stored_logits = row.copy()


def pack_batch(items: list[BufferItem]) -> ReplayBatch:
    have_all_logits = all(item.stored_logits is not None for item in items)
    return ReplayBatch(
        x=np.stack([item.x for item in items]),
        y_onehot=np.stack([item.y_onehot for item in items]),
        logits=np.stack([item.stored_logits for item in items]) if have_all_logits else None,
        stream_index=np.array([item.stream_index for item in items], dtype=np.int64),
        task_id=np.array([item.task_id for item in items], dtype=np.int64),
    )
