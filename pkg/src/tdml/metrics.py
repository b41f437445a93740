"""Retrieval quality metrics: ANMRR, mAP and precision at k.

Conventions, per query with NG relevant candidates and GTM the largest
NG over the query set:

  K       = min(4 * NG, 2 * GTM)                (cutoff)
  Rank(r) = r if r <= K else 1.25 * K           (miss penalty)
  AVR     = mean of Rank over the NG relevant items
  MRR     = AVR - 0.5 - NG / 2
  NMRR    = MRR / (1.25 * K - 0.5 - 0.5 * NG)   in [0, 1]
  ANMRR   = mean NMRR over queries

  AP      = (1/NG) * sum_i (i / rank_i)         with rank_i ascending
  P@k     = (relevant in first k) / k           (denominator always k)

The 4, 2 and 1.25 constants are arguments with those defaults. Queries
are excluded from their own candidate lists before any counting, so NG
for a self-query is its class size minus one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, UndefinedQueryError
from .numerics import sq_dist_to
from .retrieval import EmbeddingIndex

DEFAULT_KS = (5, 10, 50, 100, 1000)


@dataclass(frozen=True)
class QueryOutcome:
    """Ranked candidate labels for one query, self already excluded."""

    query_id: str
    query_label: str
    ranked_labels: tuple
    ng: int = -1  # derived; any passed value is overwritten

    def __post_init__(self):
        labels = tuple(self.ranked_labels)
        object.__setattr__(self, "ranked_labels", labels)
        object.__setattr__(self, "ng", sum(1 for l in labels if l == self.query_label))


def _relevant_ranks(outcome: QueryOutcome) -> np.ndarray:
    return np.array(
        [i + 1 for i, l in enumerate(outcome.ranked_labels) if l == outcome.query_label],
        dtype=np.float64,
    )


def precision_at_k(outcome: QueryOutcome, k: int) -> float:
    """Fraction of the first k ranks that are relevant; denominator is k."""
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    hits = sum(1 for l in outcome.ranked_labels[:k] if l == outcome.query_label)
    return hits / k


def average_precision(outcome: QueryOutcome) -> float:
    if outcome.ng < 1:
        raise UndefinedQueryError(
            f"query {outcome.query_id!r} has no relevant candidates",
            query_ids=(outcome.query_id,),
        )
    ranks = _relevant_ranks(outcome)
    return float(np.mean(np.arange(1, outcome.ng + 1) / ranks))


def nmrr(
    outcome: QueryOutcome,
    gtm: int,
    *,
    ng_factor: int = 4,
    gtm_factor: int = 2,
    penalty: float = 1.25,
) -> float:
    """Normalized modified retrieval rank of one query, in [0, 1]."""
    if outcome.ng < 1:
        raise UndefinedQueryError(
            f"query {outcome.query_id!r} has no relevant candidates",
            query_ids=(outcome.query_id,),
        )
    if gtm < outcome.ng:
        raise InvalidArgumentError(f"GTM {gtm} is smaller than NG {outcome.ng}")
    ranks = _relevant_ranks(outcome)
    return _nmrr_from_ranks(ranks, outcome.ng, gtm, ng_factor, gtm_factor, penalty)


def _nmrr_from_ranks(ranks, ng, gtm, ng_factor, gtm_factor, penalty) -> float:
    cutoff = min(ng_factor * ng, gtm_factor * gtm)
    capped = np.where(ranks <= cutoff, ranks, penalty * cutoff)
    avr = float(np.mean(capped))
    mrr = avr - 0.5 - ng / 2.0
    denom = penalty * cutoff - 0.5 - 0.5 * ng
    return mrr / denom


@dataclass(frozen=True)
class MetricsReport:
    anmrr: float
    mean_ap: float
    precision_at: dict
    per_class_anmrr: dict
    num_queries: int
    gtm: int


def evaluate(
    index: EmbeddingIndex,
    queries,
    ks=DEFAULT_KS,
    *,
    ng_factor: int = 4,
    gtm_factor: int = 2,
    penalty: float = 1.25,
) -> MetricsReport:
    """Score every (id, label, vector) query against the index.

    A query whose id exists in the index is excluded from its own
    candidates. Queries left with zero relevant candidates make the
    metrics undefined; they are all collected and reported in one
    UndefinedQueryError.
    """
    queries = list(queries)
    if not queries:
        raise InvalidArgumentError("need at least one query")
    ks = tuple(int(k) for k in ks)
    if any(k < 1 for k in ks):
        raise InvalidArgumentError(f"every precision cutoff must be >= 1, got {ks}")

    label_values, codes_sorted = np.unique(np.asarray(index._labels_sorted), return_inverse=True)
    code_of = {str(lbl): c for c, lbl in enumerate(label_values)}
    pos_of_id = {rid: pos for pos, rid in enumerate(index._ids_sorted)}

    all_ranks: list[np.ndarray] = []
    ngs: list[int] = []
    qlabels: list[str] = []
    ap_values: list[float] = []
    hits_at = {k: 0 for k in ks}
    undefined: list[str] = []

    for qid, qlabel, qvec in queries:
        qid = str(qid)
        qlabel = str(qlabel)
        dists = sq_dist_to(index._vectors_sorted, qvec)
        order = np.argsort(dists, kind="stable")
        qcode = code_of.get(qlabel, -1)
        rel = codes_sorted[order] == qcode
        pos_self = pos_of_id.get(qid)
        if pos_self is not None:
            rel = rel[order != pos_self]
        ranks = np.flatnonzero(rel).astype(np.float64) + 1.0
        ng = ranks.size
        if ng == 0:
            undefined.append(qid)
            continue
        all_ranks.append(ranks)
        ngs.append(ng)
        qlabels.append(qlabel)
        ap_values.append(float(np.mean(np.arange(1, ng + 1) / ranks)))
        for k in ks:
            hits_at[k] += int(np.searchsorted(ranks, k, side="right"))

    if undefined:
        raise UndefinedQueryError(
            "queries with no relevant candidates: " + ", ".join(repr(q) for q in undefined),
            query_ids=tuple(undefined),
        )

    gtm = max(ngs)
    nmrr_values = np.array(
        [
            _nmrr_from_ranks(ranks, ng, gtm, ng_factor, gtm_factor, penalty)
            for ranks, ng in zip(all_ranks, ngs)
        ]
    )
    n_q = len(ngs)
    per_class: dict[str, float] = {}
    for label in sorted(set(qlabels)):
        sel = [i for i, l in enumerate(qlabels) if l == label]
        per_class[label] = float(np.mean(nmrr_values[sel]))

    return MetricsReport(
        anmrr=float(np.mean(nmrr_values)),
        mean_ap=float(np.mean(ap_values)),
        precision_at={k: hits_at[k] / (k * n_q) for k in ks},
        per_class_anmrr=per_class,
        num_queries=n_q,
        gtm=int(gtm),
    )


def format_report(report: MetricsReport) -> str:
    """Flat `name value` lines, metric values at four decimal places."""
    lines = [
        f"queries {report.num_queries}",
        f"GTM {report.gtm}",
        f"ANMRR {report.anmrr:.4f}",
        f"mAP {report.mean_ap:.4f}",
    ]
    for k in sorted(report.precision_at):
        lines.append(f"P@{k} {report.precision_at[k]:.4f}")
    for label in sorted(report.per_class_anmrr):
        lines.append(f"ANMRR[{label}] {report.per_class_anmrr[label]:.4f}")
    return "\n".join(lines) + "\n"


def report_json(report: MetricsReport) -> str:
    """JSON carrying the same values as :func:`format_report`."""
    payload = {
        "queries": report.num_queries,
        "gtm": report.gtm,
        "anmrr": round(report.anmrr, 4),
        "map": round(report.mean_ap, 4),
        "p_at": {str(k): round(report.precision_at[k], 4) for k in sorted(report.precision_at)},
        "per_class_anmrr": {
            label: round(v, 4) for label, v in sorted(report.per_class_anmrr.items())
        },
    }
    return json.dumps(payload, indent=2) + "\n"
