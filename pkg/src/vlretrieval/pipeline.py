"""Offline export/indexing and online query path.

Online: raw query -> sorted tokens + qid -> query embedding -> ANN top-K'
-> Boolean filter -> top-K.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from vlretrieval import encoder as enc
from vlretrieval.catalog import Catalog, Query
from vlretrieval.filter import FilterExpr, InvertedIndex, apply_filter, build_inverted, parse_filter
from vlretrieval.index import EmbeddingMatrix, HCIndex, build
from vlretrieval.metrics import EvalCase

log = logging.getLogger(__name__)

DEFAULT_OVERFETCH = 3


class VocabMismatchError(ValueError):
    pass


def check_vocab(fingerprint: int, catalog: Catalog, params: enc.EncoderParams) -> None:
    if params.vocab_size != len(catalog.vocab) or fingerprint != catalog.vocab_fingerprint():
        raise VocabMismatchError(
            f"checkpoint vocabulary (size {params.vocab_size}, fingerprint {fingerprint:#010x}) "
            f"does not match catalog (size {len(catalog.vocab)}, fingerprint {catalog.vocab_fingerprint():#010x})"
        )


def export_embeddings(params: enc.EncoderParams, catalog: Catalog) -> EmbeddingMatrix:
    products = [catalog[pid] for pid in sorted(catalog.products)]
    return EmbeddingMatrix([p.id for p in products], enc.encode_products(params, products, catalog.vocab))


@dataclass
class QueryResult:
    query: Query
    hits: list[tuple[int, float]]
    dropped_tokens: tuple[str, ...] = ()

    def render(self) -> str:
        lines = [f"qid\t{self.query.qid}"]
        lines += [f"{rank}\t{pid}\t{score:.6f}" for rank, (pid, score) in enumerate(self.hits, start=1)]
        return "\n".join(lines) + "\n"


class Retriever:
    """Immutable serving bundle: encoder, ANN index and inverted index."""

    def __init__(self, params: enc.EncoderParams, catalog: Catalog, index: HCIndex, inverted: InvertedIndex | None = None):
        self.params = params
        self.catalog = catalog
        self.index = index
        self.inverted = inverted if inverted is not None else build_inverted(catalog)

    def embed(self, query: Query) -> tuple[np.ndarray, tuple[str, ...]]:
        known = [t for t in query.tokens if t in self.catalog.vocab]
        dropped = tuple(t for t in query.tokens if t not in self.catalog.vocab)
        if not known:
            raise enc.UnknownTokenError(query.tokens[0])
        if dropped:
            log.warning("ignoring out-of-vocabulary tokens: %s", " ".join(dropped))
        return enc.encode_query(self.params, known, self.catalog.vocab), dropped

    def query(
        self,
        raw: str | Query,
        k: int = 10,
        expr: FilterExpr | None = None,
        overfetch: int = DEFAULT_OVERFETCH,
        nprobe: int | None = None,
    ) -> QueryResult:
        q = raw if isinstance(raw, Query) else Query.from_raw(raw)
        u, dropped = self.embed(q)
        fetch = k * overfetch if expr else k
        hits = self.index.search(u, fetch, nprobe)
        if expr:
            hits = apply_filter(hits, expr, self.inverted)
        return QueryResult(q, hits[:k], dropped)


def build_retriever(
    params: enc.EncoderParams, catalog: Catalog, n_lists: int | None = None, seed: int = 0, iters: int = 20
) -> tuple[Retriever, EmbeddingMatrix]:
    emb = export_embeddings(params, catalog)
    return Retriever(params, catalog, build(emb, n_lists, iters=iters, seed=seed)), emb


def load_cases(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "query" not in rec or "targets" not in rec:
                raise ValueError(f"{path}:{line_no}: eval case needs 'query' and 'targets'")
            records.append(rec)
    return records


def intent_from_targets(catalog: Catalog, targets: Sequence[int]) -> str:
    counts = Counter(catalog[t].category for t in targets)
    return min(counts, key=lambda c: (-counts[c], c))


def run_cases(retriever: Retriever, records: Sequence[dict], k: int, overfetch: int = DEFAULT_OVERFETCH) -> list[EvalCase]:
    cases = []
    for rec in records:
        expr = parse_filter(rec["filter"]) if rec.get("filter") else None
        result = retriever.query(rec["query"], k, expr, overfetch)
        targets = [int(t) for t in rec["targets"]]
        intent = rec.get("intent") or intent_from_targets(retriever.catalog, targets)
        cases.append(EvalCase(result.query, frozenset(targets), tuple(pid for pid, _ in result.hits), intent))
    return cases


def cases_to_records(pairs: Sequence[tuple[Query, int]], catalog: Catalog) -> list[dict]:
    return [{"query": q.raw, "targets": [pid], "intent": catalog[pid].category} for q, pid in pairs]


def write_jsonl(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

