"""Boolean relevance control: AND-filter ANN results through inverted lists."""

from __future__ import annotations

import re
import warnings
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Sequence

from vlretrieval.catalog import Catalog

INDEXED_ATTRIBUTES = ("brand", "category")


class FilterParseError(ValueError):
    def __init__(self, message: str, column: int, token: int):
        super().__init__(f"{message} at column {column} (token {token})")
        self.column = column
        self.token = token


class UnknownTermWarning(UserWarning):
    pass


@dataclass
class InvertedIndex:
    postings: dict[tuple[str, str], list[int]] = field(default_factory=dict)

    def get(self, name: str, value: str) -> list[int] | None:
        return self.postings.get((name.lower(), value))

    def __len__(self) -> int:
        return len(self.postings)


@dataclass(frozen=True)
class FilterExpr:
    conjuncts: tuple[tuple[str, str], ...] = ()

    def __bool__(self) -> bool:
        return bool(self.conjuncts)

    def __and__(self, other: "FilterExpr") -> "FilterExpr":
        return FilterExpr(self.conjuncts + other.conjuncts)

    def __str__(self) -> str:
        return " AND ".join(f"{name}:{value}" for name, value in self.conjuncts)


def build_inverted(catalog: Catalog) -> InvertedIndex:
    lists: dict[tuple[str, str], list[int]] = {}
    for pid in sorted(catalog.products):
        product = catalog.products[pid]
        for name in INDEXED_ATTRIBUTES:
            lists.setdefault((name, product.attribute(name)), []).append(pid)
    return InvertedIndex(lists)


def gallop_intersect(a: Sequence[int], b: Sequence[int]) -> list[int]:
    """Intersect two ascending duplicate-free lists by exponential search."""
    if len(a) > len(b):
        a, b = b, a
    out, lo = [], 0
    for x in a:
        step = 1
        hi = lo
        while hi < len(b) and b[hi] < x:
            lo = hi
            hi += step
            step *= 2
        lo = bisect_left(b, x, lo, min(hi + 1, len(b)))
        if lo == len(b):
            break
        if b[lo] == x:
            out.append(x)
            lo += 1
    return out


def allowed_ids(expr: FilterExpr, index: InvertedIndex) -> list[int]:
    lists = []
    for name, value in expr.conjuncts:
        posting = index.get(name, value)
        if posting is None:
            warnings.warn(f"no products with {name}:{value}; filter removes everything", UnknownTermWarning, stacklevel=3)
            return []
        lists.append(posting)
    lists.sort(key=len)
    result = lists[0]
    for posting in lists[1:]:
        result = gallop_intersect(result, posting)
        if not result:
            break
    return result


def apply_filter(ann_results: Sequence, expr: FilterExpr, index: InvertedIndex) -> list:
    """Keep the ANN results that satisfy every conjunct, in their original order.

    ``ann_results`` may be bare ids or ``(id, score)`` pairs. An empty
    expression returns the input unchanged. A conjunct with no posting list
    matches nothing (with an :class:`UnknownTermWarning`).
    """
    if not expr:
        return list(ann_results)
    keep = set(allowed_ids(expr, index))
    return [r for r in ann_results if (r[0] if isinstance(r, tuple) else r) in keep]


_PAIR = re.compile(r"\s*([^\s:]+)\s*:\s*(\S+)")


def parse_filter(spec: str) -> FilterExpr:
    """Parse ``name:value (AND name:value)*``.

    Attribute names are lowercased; values are kept verbatim. Whitespace
    around tokens is ignored.

    Raises:
        FilterParseError: with the 1-based column and token number of the problem.
    """
    if not spec.strip():
        return FilterExpr()
    pairs = []
    pos, token = 0, 1
    while True:
        m = _PAIR.match(spec, pos)
        if m is None or (m.group(2).upper() == "AND"):
            col = len(spec) - len(spec[pos:].lstrip()) + 1
            raise FilterParseError("expected name:value", col, token)
        pairs.append((m.group(1).lower(), m.group(2)))
        pos = m.end()
        rest = spec[pos:]
        if not rest.strip():
            break
        m_and = re.match(r"\s+AND\s+", rest)
        if m_and is None:
            col = pos + len(rest) - len(rest.lstrip()) + 1
            raise FilterParseError("expected AND", col, token + 1)
        pos += m_and.end()
        token += 1
    return FilterExpr(tuple(pairs))

