"""Class-balanced PK batching and flip augmentation.

Every batch holds exactly P distinct classes with K records each. Record
queues per class persist across epochs: a class's records are consumed in
shuffled order and the queue is refilled with a fresh shuffle when it runs
short, so each record of a class with at least K records shows up at least
once every ceil(class_size / K) epochs. Classes with fewer than K records
are sampled with replacement and flagged.

All randomness flows from one integer seed; the same (labels, P, K, seed)
always yields the same plans, and ``make_pk_batches`` can reproduce any
epoch in isolation by replaying the earlier ones.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

_SAMPLER_SALT = 0x5A17


@dataclass(frozen=True)
class BatchPlan:
    """Batches for one epoch, as tuples of record indices."""

    batches: tuple[tuple[int, ...], ...]
    p: int
    k: int
    seed: int
    epoch: int
    # Labels whose class size is below K (sampled with replacement).
    undersized_classes: tuple


class PkBatchPlanner:
    """Stateful planner producing one BatchPlan per epoch."""

    def __init__(self, labels, p: int, k: int, seed: int):
        labels = list(labels)
        if p < 2 or k < 2:
            raise InvalidArgumentError(f"need P >= 2 and K >= 2, got P={p} K={k}")
        if p * k > len(labels):
            raise InvalidArgumentError(
                f"P*K = {p * k} exceeds the {len(labels)} available records"
            )
        self.classes = sorted(set(labels))
        if len(self.classes) < p:
            raise InvalidArgumentError(
                f"need at least P={p} classes, dataset has {len(self.classes)}"
            )
        self.p = p
        self.k = k
        self.seed = int(seed)
        self.n_records = len(labels)
        self._members = {c: [i for i, l in enumerate(labels) if l == c] for c in self.classes}
        self.undersized = tuple(c for c in self.classes if len(self._members[c]) < k)
        if self.undersized:
            warnings.warn(
                f"classes smaller than K={k} are sampled with replacement: "
                f"{list(self.undersized)}",
                stacklevel=2,
            )

        seqs = np.random.SeedSequence((self.seed, _SAMPLER_SALT)).spawn(len(self.classes) + 1)
        self._order_rng = np.random.default_rng(seqs[0])
        self._class_rngs = {c: np.random.default_rng(s) for c, s in zip(self.classes, seqs[1:])}
        self._queues: dict = {c: [] for c in self.classes}
        self._next_epoch = 0

    def _draw_members(self, cls) -> list:
        members = self._members[cls]
        rng = self._class_rngs[cls]
        if len(members) < self.k:
            picks = rng.integers(0, len(members), size=self.k)
            return [members[int(i)] for i in picks]
        queue = self._queues[cls]
        out: list[int] = []
        deferred: list[int] = []
        while len(out) < self.k:
            if not queue:
                queue.extend(int(members[i]) for i in rng.permutation(len(members)))
            idx = queue.pop(0)
            # A refill can resurface an index drawn moments ago; push it to
            # the next draw rather than duplicating it within this batch.
            if idx in out:
                deferred.append(idx)
            else:
                out.append(idx)
        queue[:0] = deferred
        return out

    def _shuffled_classes(self) -> list:
        return [self.classes[int(i)] for i in self._order_rng.permutation(len(self.classes))]

    def next_epoch(self) -> BatchPlan:
        n_batches = max(1, self.n_records // (self.p * self.k))
        class_queue = self._shuffled_classes()
        batches = []
        for _ in range(n_batches):
            chosen: list = []
            deferred: list = []
            while len(chosen) < self.p:
                if not class_queue:
                    class_queue = self._shuffled_classes()
                c = class_queue.pop(0)
                if c in chosen:
                    deferred.append(c)
                else:
                    chosen.append(c)
            class_queue[:0] = deferred
            batch: list[int] = []
            for c in chosen:
                batch.extend(self._draw_members(c))
            batches.append(tuple(batch))
        plan = BatchPlan(
            batches=tuple(batches),
            p=self.p,
            k=self.k,
            seed=self.seed,
            epoch=self._next_epoch,
            undersized_classes=self.undersized,
        )
        self._next_epoch += 1
        return plan


def make_pk_batches(labels, p: int, k: int, seed: int, epoch: int = 0) -> BatchPlan:
    """Plan for one epoch; earlier epochs are replayed to reach its state."""
    if epoch < 0:
        raise InvalidArgumentError(f"epoch must be >= 0, got {epoch}")
    planner = PkBatchPlanner(labels, p, k, seed)
    for _ in range(epoch):
        planner.next_epoch()
    return planner.next_epoch()


def augment_flip(payload, flip_horizontal: bool, flip_vertical: bool) -> np.ndarray:
    """Reverse the W (horizontal) and/or H (vertical) axes of an H x W x C map.

    Non-map payloads pass through unchanged with a warning; there is no
    spatial axis to flip in a flat vector.
    """
    arr = np.asarray(payload)
    if arr.ndim != 3:
        warnings.warn("flip augmentation skipped: payload has no spatial axes", stacklevel=2)
        return arr
    out = arr
    if flip_horizontal:
        out = out[:, ::-1, :]
    if flip_vertical:
        out = out[::-1, :, :]
    return np.ascontiguousarray(out)
