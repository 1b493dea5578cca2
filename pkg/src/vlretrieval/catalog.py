"""Product corpus, query records and sampling-probability estimation."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from vlretrieval import querynorm

DEFAULT_NUM_PATCHES = 16  # 4x4 grid
DEFAULT_PATCH_DIM = 8


class CatalogError(ValueError):
    pass


class CatalogParseError(CatalogError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class DuplicateProductError(CatalogError):
    def __init__(self, product_id: int, line_no: int | None = None):
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"duplicate product id {product_id}{where}")
        self.product_id = product_id


class UnknownProductError(CatalogError, KeyError):
    def __init__(self, product_id: int):
        super().__init__(f"unknown product id {product_id}")
        self.product_id = product_id


@dataclass(frozen=True)
class Product:
    id: int
    title_tokens: tuple[str, ...]
    patches: np.ndarray  # (L, D_img)
    brand: str
    category: str
    sample_prob: float | None = None

    def __post_init__(self):
        patches = np.asarray(self.patches, dtype=np.float64)
        if patches.ndim != 2:
            raise CatalogError(f"product {self.id}: patches must be 2-D, got shape {patches.shape}")
        patches.setflags(write=False)
        object.__setattr__(self, "patches", patches)
        object.__setattr__(self, "title_tokens", tuple(self.title_tokens))
        if self.sample_prob is not None and not self.sample_prob > 0:
            raise CatalogError(f"product {self.id}: sample_prob must be > 0, got {self.sample_prob}")

    def attribute(self, name: str) -> str | None:
        if name == "brand":
            return self.brand
        if name == "category":
            return self.category
        return None


@dataclass(frozen=True)
class Query:
    raw: str
    tokens: tuple[str, ...]
    qid: int
    constraints: tuple[tuple[str, str], ...] = ()

    @classmethod
    def from_raw(cls, raw: str, constraints: Iterable[tuple[str, str]] = ()) -> "Query":
        tokens = querynorm.normalize(raw)
        return cls(raw, tuple(tokens), querynorm.qid(tokens), tuple(constraints))


@dataclass
class Catalog:
    """Id-keyed products plus a dense token vocabulary.

    The vocabulary is the byte-sorted set of every title token (and any extra
    query tokens passed to :func:`build_vocab`), so ids do not depend on
    record order.
    """

    products: dict[int, Product]
    vocab: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.vocab:
            self.vocab = build_vocab(self.products.values())

    def __len__(self) -> int:
        return len(self.products)

    def __iter__(self) -> Iterator[Product]:
        return iter(self.products.values())

    def __getitem__(self, product_id: int) -> Product:
        try:
            return self.products[product_id]
        except KeyError:
            raise UnknownProductError(product_id) from None

    @property
    def ids(self) -> list[int]:
        return list(self.products)

    def has_sample_probs(self) -> bool:
        return all(p.sample_prob is not None for p in self.products.values())

    def vocab_fingerprint(self) -> int:
        return vocab_fingerprint(self.vocab)


def build_vocab(products: Iterable[Product], extra_tokens: Iterable[str] = ()) -> dict[str, int]:
    tokens = {t for p in products for t in p.title_tokens}
    tokens.update(extra_tokens)
    return {t: i for i, t in enumerate(querynorm.sorted_tokens(tokens))}


def vocab_fingerprint(vocab: dict[str, int]) -> int:
    ordered = sorted(vocab, key=vocab.__getitem__)
    return querynorm.fnv1a_32(b"\x1e".join(t.encode("utf-8") for t in ordered))


def make_catalog(products: Sequence[Product], extra_tokens: Iterable[str] = ()) -> Catalog:
    by_id: dict[int, Product] = {}
    for p in products:
        if p.id in by_id:
            raise DuplicateProductError(p.id)
        by_id[p.id] = p
    return Catalog(by_id, build_vocab(by_id.values(), extra_tokens))


def _parse_record(obj: dict, line_no: int, num_patches: int, patch_dim: int) -> Product:
    if not isinstance(obj, dict):
        raise CatalogParseError(line_no, "record is not an object")
    for key in ("id", "title", "brand", "category"):
        if key not in obj:
            raise CatalogParseError(line_no, f"missing field {key!r}")
    pid = obj["id"]
    if isinstance(pid, bool) or not isinstance(pid, int):
        raise CatalogParseError(line_no, f"id must be an integer, got {pid!r}")
    if not isinstance(obj["title"], str):
        raise CatalogParseError(line_no, "title must be a string")
    if "patches" in obj and obj["patches"] is not None:
        try:
            patches = np.asarray(obj["patches"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise CatalogParseError(line_no, f"bad patches: {exc}") from None
        if patches.shape != (num_patches, patch_dim):
            raise CatalogParseError(
                line_no, f"patches must have shape ({num_patches}, {patch_dim}), got {patches.shape}"
            )
    else:
        # no image features supplied: the image branch sees a blank image
        patches = np.zeros((num_patches, patch_dim))
    prob = obj.get("sample_prob")
    if prob is not None and not (isinstance(prob, (int, float)) and prob > 0):
        raise CatalogParseError(line_no, f"sample_prob must be a positive number, got {prob!r}")
    return Product(
        id=pid,
        title_tokens=tuple(querynorm.tokenize(obj["title"])),
        patches=patches,
        brand=str(obj["brand"]),
        category=str(obj["category"]),
        sample_prob=None if prob is None else float(prob),
    )


def load_catalog(
    path: str | Path,
    num_patches: int = DEFAULT_NUM_PATCHES,
    patch_dim: int = DEFAULT_PATCH_DIM,
) -> Catalog:
    """Read a JSON-lines product file.

    Args:
        path: one JSON object per line with ``id``, ``title``, ``brand``,
            ``category`` and optionally ``patches`` and ``sample_prob``.
        num_patches: expected patch count L per product.
        patch_dim: expected patch feature width D_img.

    Raises:
        CatalogParseError: malformed line (carries the 1-based line number).
        DuplicateProductError: an id occurs twice.
    """
    products: dict[int, Product] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CatalogParseError(line_no, f"invalid JSON: {exc.msg}") from None
            product = _parse_record(obj, line_no, num_patches, patch_dim)
            if product.id in products:
                raise DuplicateProductError(product.id, line_no)
            products[product.id] = product
    return Catalog(products, build_vocab(products.values()))


def product_to_record(product: Product) -> dict:
    record = {
        "id": product.id,
        "title": " ".join(product.title_tokens),
        "brand": product.brand,
        "category": product.category,
        "patches": product.patches.tolist(),
    }
    if product.sample_prob is not None:
        record["sample_prob"] = product.sample_prob
    return record


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for product in catalog:
            fh.write(json.dumps(product_to_record(product), ensure_ascii=False))
            fh.write("\n")


def estimate_sample_probs(
    catalog: Catalog,
    interactions: Iterable[tuple[int, int]],
    smoothing: float = 1.0,
) -> Catalog:
    """Set every product's sample_prob to its additively smoothed click share.

    ``p(i) = (count(i) + smoothing) / (total + smoothing * n_products)``

    Args:
        catalog: products to update; a new catalog is returned.
        interactions: ``(qid, product_id)`` pairs.
        smoothing: additive pseudo-count, must be positive.
    """
    if not smoothing > 0:
        raise CatalogError(f"smoothing must be > 0, got {smoothing}")
    counts: Counter[int] = Counter()
    for _, pid in interactions:
        if pid not in catalog.products:
            raise UnknownProductError(pid)
        counts[pid] += 1
    total = sum(counts.values())
    denom = total + smoothing * len(catalog)
    products = {
        pid: replace(p, sample_prob=(counts[pid] + smoothing) / denom)
        for pid, p in catalog.products.items()
    }
    return Catalog(products, dict(catalog.vocab))


def log_sample_probs(products: Sequence[Product]) -> np.ndarray:
    out = np.empty(len(products))
    for i, p in enumerate(products):
        if p.sample_prob is None:
            raise CatalogError(f"product {p.id} has no sample_prob; call estimate_sample_probs first")
        out[i] = math.log(p.sample_prob)
    return out
