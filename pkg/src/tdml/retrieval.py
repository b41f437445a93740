"""Exhaustive nearest-neighbor retrieval over an in-memory index.

Distances are squared Euclidean. Results are ordered by ascending
distance; exact distance ties break by ascending record id. Both rules
are enforced by sorting candidates by id once at build time and then
stable-argsorting distances per query.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .numerics import sq_dist_to


@dataclass(frozen=True)
class RankedEntry:
    id: str
    label: str
    distance: float


@dataclass(frozen=True)
class RankedList:
    """Query results, best first; ties already broken by ascending id."""

    entries: tuple[RankedEntry, ...]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def ids(self) -> tuple[str, ...]:
        return tuple(e.id for e in self.entries)

    def labels(self) -> tuple[str, ...]:
        return tuple(e.label for e in self.entries)


class EmbeddingIndex:
    """Immutable flat index of (id, label, vector) rows."""

    def __init__(self, ids, labels, vectors):
        self.ids = tuple(str(i) for i in ids)
        self.labels = tuple(str(l) for l in labels)
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.ids):
            raise InvalidArgumentError(
                f"vectors must be ({len(self.ids)}, d), got shape {vectors.shape}"
            )
        if len(self.labels) != len(self.ids):
            raise InvalidArgumentError("ids and labels must have equal length")
        self.vectors = vectors
        # Candidates in ascending-id order; a stable distance sort over
        # this order yields distance-then-id ranking in one pass.
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        self._id_order = np.array(order, dtype=np.intp)
        self._ids_sorted = np.array([self.ids[i] for i in order], dtype=object)
        self._labels_sorted = np.array([self.labels[i] for i in order], dtype=object)
        self._vectors_sorted = vectors[self._id_order]

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def build_index(records) -> EmbeddingIndex:
    """Build an index from (id, label, vector) triples.

    Duplicate ids and ragged vector lengths are rejected with the
    offending id in the message.
    """
    ids: list[str] = []
    labels: list[str] = []
    vectors: list[np.ndarray] = []
    seen: set[str] = set()
    dim: int | None = None
    for rid, label, vec in records:
        rid = str(rid)
        if rid in seen:
            raise InvalidArgumentError(f"duplicate record id {rid!r}")
        seen.add(rid)
        v = np.asarray(vec, dtype=np.float64)
        if v.ndim != 1:
            raise InvalidArgumentError(f"record {rid!r}: vector must be 1-D, got {v.shape}")
        if dim is None:
            dim = v.shape[0]
        elif v.shape[0] != dim:
            raise InvalidArgumentError(
                f"record {rid!r}: vector length {v.shape[0]} != index dim {dim}"
            )
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError(f"record {rid!r}: vector has non-finite entries")
        ids.append(rid)
        labels.append(str(label))
        vectors.append(v)
    if not ids:
        raise InvalidArgumentError("cannot build an index from zero records")
    return EmbeddingIndex(ids, labels, np.vstack(vectors))


def query(index: EmbeddingIndex, vector, k: int, exclude_id: str | None = None) -> RankedList:
    """Top-k candidates for one query vector.

    ``exclude_id`` drops that record from the candidates (self-query
    convention). k larger than the candidate count returns all of them.
    """
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    dists = sq_dist_to(index._vectors_sorted, vector)
    order = np.argsort(dists, kind="stable")
    entries = []
    for pos in order:
        rid = index._ids_sorted[pos]
        if exclude_id is not None and rid == exclude_id:
            continue
        entries.append(RankedEntry(rid, index._labels_sorted[pos], float(dists[pos])))
        if len(entries) == k:
            break
    return RankedList(tuple(entries))
