"""Query normalization and qid hashing.

Raw queries are lowercased, whitespace-split and sorted so that token order
does not matter ("dress red" and "red dress" map to the same key). The sorted
tokens are hashed with 32-bit FNV-1a into a query id.
"""

from __future__ import annotations

from typing import Iterable, Sequence

FNV32_OFFSET_BASIS = 0x811C9DC5
FNV32_PRIME = 0x01000193
TOKEN_SEPARATOR = b"\x1f"


class EmptyQueryError(ValueError):
    pass


class UnsortedTokensError(ValueError):
    pass


def fnv1a_32(data: bytes) -> int:
    h = FNV32_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV32_PRIME) & 0xFFFFFFFF
    return h


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def normalize(raw: str) -> list[str]:
    """Lowercase, split on whitespace and sort tokens by UTF-8 byte order.

    Duplicates are kept.

    Raises:
        EmptyQueryError: if ``raw`` holds no tokens.
    """
    tokens = tokenize(raw)
    if not tokens:
        raise EmptyQueryError("empty query")
    return sorted(tokens, key=lambda t: t.encode("utf-8"))


def _is_sorted(tokens: Sequence[str]) -> bool:
    encoded = [t.encode("utf-8") for t in tokens]
    return all(a <= b for a, b in zip(encoded, encoded[1:]))


def qid(tokens: Sequence[str]) -> int:
    """FNV-1a 32-bit hash of ``tokens`` joined by the 0x1F separator byte.

    Args:
        tokens: token list already sorted by byte order (see :func:`normalize`).

    Returns:
        Unsigned 32-bit query id.
    """
    if not _is_sorted(tokens):
        raise UnsortedTokensError(f"tokens must be sorted, got {list(tokens)!r}")
    return fnv1a_32(TOKEN_SEPARATOR.join(t.encode("utf-8") for t in tokens))


def hash_query(raw: str) -> int:
    return qid(normalize(raw))


def sorted_tokens(tokens: Iterable[str]) -> list[str]:
    return sorted(tokens, key=lambda t: t.encode("utf-8"))
