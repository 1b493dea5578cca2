"""Offline retrieval metrics: Recall@K, P_rel and P_cate."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from vlretrieval.catalog import Product, Query


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class EvalCase:
    query: Query
    target_ids: frozenset[int]
    retrieved: tuple[int, ...]  # ranked, already truncated to K
    intent: str | None = None


def jaccard(query: Query, product: Product) -> float:
    q, t = set(query.tokens), set(product.title_tokens)
    union = q | t
    return len(q & t) / len(union) if union else 0.0


@dataclass
class RelevanceScorer:
    """Stand-in for a trained relevance model plus category lookups.

    ``intent_of`` defaults to the case's own ``intent`` field.
    """

    products: dict[int, Product]
    score: Callable[[Query, Product], float] = jaccard
    category_of: Callable[[Product], str] = field(default=lambda p: p.category)
    intent_of: Callable[[EvalCase], str | None] = field(default=lambda case: case.intent)


def _require(cases: Sequence[EvalCase]) -> None:
    if not cases:
        raise UndefinedMetricError("metric undefined on an empty case list")


def recall_at_k(cases: Sequence[EvalCase], k: int | None = None) -> float:
    """Fraction of cases whose top-``k`` list hits at least one target.

    ``k=None`` uses each case's full retrieved list.
    """
    _require(cases)
    hits = 0
    for case in cases:
        top = case.retrieved if k is None else case.retrieved[:k]
        hits += any(pid in case.target_ids for pid in top)
    return hits / len(cases)


def _mean_of_case_means(cases: Sequence[EvalCase], per_item: Callable[[EvalCase, int], float]) -> float:
    # cases with an empty retrieved list contribute 0, keeping N in the denominator
    _require(cases)
    total = math.fsum(
        math.fsum(per_item(case, pid) for pid in case.retrieved) / len(case.retrieved) if case.retrieved else 0.0
        for case in cases
    )
    return total / len(cases)


def p_rel(cases: Sequence[EvalCase], scorer: RelevanceScorer) -> float:
    """Mean relevance score over all retrieved (query, product) pairs.

    Each case is normalised by its own retrieved-list size, so filtered
    (shorter) lists are not penalised twice.
    """

    def item(case: EvalCase, pid: int) -> float:
        s = scorer.score(case.query, scorer.products[pid])
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"relevance score {s} outside [0, 1]")
        return s

    return _mean_of_case_means(cases, item)


def p_cate(cases: Sequence[EvalCase], scorer: RelevanceScorer) -> float:
    """Share of retrieved products whose category equals the query's intent category."""

    def item(case: EvalCase, pid: int) -> float:
        return float(scorer.intent_of(case) == scorer.category_of(scorer.products[pid]))

    return _mean_of_case_means(cases, item)


@dataclass
class MetricRow:
    metric: str
    k: int
    value: float
    n_cases: int


def evaluate(cases: Sequence[EvalCase], scorer: RelevanceScorer, k: int) -> list[MetricRow]:
    n = len(cases)
    return [
        MetricRow(f"Recall@{k}", k, recall_at_k(cases, k), n),
        MetricRow("P_rel", k, p_rel(cases, scorer), n),
        MetricRow("P_cate", k, p_cate(cases, scorer), n),
    ]


def report_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "K", "value", "n_cases"])
    for r in rows:
        writer.writerow([r.metric, r.k, f"{r.value:.6f}", r.n_cases])
    return buf.getvalue()
