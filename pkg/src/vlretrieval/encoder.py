"""Desk-scale query and product encoders with hand-written backward passes.

Queries: mean of token embeddings -> ``query_proj`` -> L2 normalize.
Products: title branch (mean token embedding -> ``title_proj``) plus image
branch (patch features -> ``patch_proj`` -> mean -> ``image_proj``), summed,
passed through ``fuse_proj`` and L2 normalized.

The masked-patch head replaces masked projected patches with ``mask_emb`` and
predicts every position from ``[x_l, mean_l x]`` through a position-specific
linear map ``mix_proj[l]``.

All row vectors; a projection is ``x @ W``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from vlretrieval.catalog import Product

CHECKPOINT_MAGIC = b"MMR1"
_HEADER = struct.Struct("<4s5I")  # magic, D, D_img, |vocab|, L, vocab fingerprint


class UnknownTokenError(KeyError):
    def __init__(self, token: str):
        super().__init__(f"token not in vocabulary: {token!r}")
        self.token = token


class ShapeError(ValueError):
    pass


class MaskConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderParams:
    token_emb: np.ndarray  # (V, D)
    patch_proj: np.ndarray  # (D_img, D)
    query_proj: np.ndarray  # (D, D)
    title_proj: np.ndarray  # (D, D)
    image_proj: np.ndarray  # (D, D)
    fuse_proj: np.ndarray  # (D, D)
    mask_emb: np.ndarray  # (D,)
    mix_proj: np.ndarray  # (L, 2D, D)
    log_tau: np.ndarray  # (1,), see losses.Temperature

    @property
    def dim(self) -> int:
        return self.token_emb.shape[1]

    @property
    def patch_dim(self) -> int:
        return self.patch_proj.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.token_emb.shape[0]

    @property
    def num_patches(self) -> int:
        return self.mix_proj.shape[0]

    def blocks(self) -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{name: arr.copy() for name, arr in self.blocks()})

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams(**{name: np.zeros_like(arr) for name, arr in self.blocks()})

    def validate(self) -> None:
        D, Di, L = self.dim, self.patch_dim, self.num_patches
        expected = {
            "patch_proj": (Di, D),
            "query_proj": (D, D),
            "title_proj": (D, D),
            "image_proj": (D, D),
            "fuse_proj": (D, D),
            "mask_emb": (D,),
            "mix_proj": (L, 2 * D, D),
            "log_tau": (1,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {getattr(self, name).shape}")
        for name, arr in self.blocks():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")


def init_params(
    vocab_size: int,
    dim: int = 64,
    patch_dim: int = 8,
    num_patches: int = 16,
    seed: int = 0,
    tau: float = 0.1,
) -> EncoderParams:
    rng = np.random.default_rng(seed)

    def mat(rows, cols):
        return rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols))

    return EncoderParams(
        token_emb=rng.normal(0.0, 1.0, size=(vocab_size, dim)),
        patch_proj=mat(patch_dim, dim),
        query_proj=mat(dim, dim),
        title_proj=mat(dim, dim),
        image_proj=mat(dim, dim),
        fuse_proj=mat(dim, dim),
        mask_emb=rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim),
        mix_proj=rng.normal(0.0, 1.0 / np.sqrt(2 * dim), size=(num_patches, 2 * dim, dim)),
        log_tau=np.array([np.log(tau)]),
    )


# ---------------------------------------------------------------------------
# building blocks


NORM_EPS = 1e-12


def l2_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # the floor keeps all-zero rows (e.g. products without imagery) finite
    norm = np.maximum(np.sqrt(np.sum(x * x, axis=-1, keepdims=True)), NORM_EPS)
    return x / norm, norm


def l2_normalize_backward(y: np.ndarray, norm: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / norm


def token_ids(tokens: Sequence[str], vocab: Mapping[str, int]) -> list[int]:
    try:
        return [vocab[t] for t in tokens]
    except KeyError as exc:
        raise UnknownTokenError(exc.args[0]) from None


def pooling_matrix(token_lists: Sequence[Sequence[str]], vocab: Mapping[str, int]) -> np.ndarray:
    """(B, V) matrix whose row b averages the embeddings of ``token_lists[b]``."""
    pool = np.zeros((len(token_lists), len(vocab)))
    for b, tokens in enumerate(token_lists):
        if not tokens:
            raise ValueError(f"row {b}: empty token list")
        ids = token_ids(tokens, vocab)
        np.add.at(pool[b], ids, 1.0 / len(ids))
    return pool


def stack_patches(products: Sequence[Product], params: EncoderParams) -> np.ndarray:
    want = (params.num_patches, params.patch_dim)
    for p in products:
        if p.patches.shape != want:
            raise ShapeError(f"product {p.id}: patches shape {p.patches.shape}, expected {want}")
    return np.stack([p.patches for p in products])


# ---------------------------------------------------------------------------
# query tower


@dataclass
class QueryCache:
    pool: np.ndarray
    pooled: np.ndarray
    unit: np.ndarray
    norm: np.ndarray


def query_forward(params: EncoderParams, pool: np.ndarray) -> tuple[np.ndarray, QueryCache]:
    pooled = pool @ params.token_emb
    h = pooled @ params.query_proj
    u, norm = l2_normalize(h)
    return u, QueryCache(pool, pooled, u, norm)


def query_backward(params: EncoderParams, cache: QueryCache, du: np.ndarray, grads: EncoderParams) -> None:
    dh = l2_normalize_backward(cache.unit, cache.norm, du)
    grads.query_proj += cache.pooled.T @ dh
    grads.token_emb += cache.pool.T @ (dh @ params.query_proj.T)


def encode_queries(params: EncoderParams, token_lists: Sequence[Sequence[str]], vocab: Mapping[str, int]) -> np.ndarray:
    u, _ = query_forward(params, pooling_matrix(token_lists, vocab))
    return u


def encode_query(params: EncoderParams, tokens: Sequence[str], vocab: Mapping[str, int]) -> np.ndarray:
    """Unit-norm query embedding of shape (D,).

    Raises:
        UnknownTokenError: a token is missing from ``vocab``.
    """
    return encode_queries(params, [tokens], vocab)[0]


# ---------------------------------------------------------------------------
# product tower


@dataclass
class ProductCache:
    pool: np.ndarray
    patches: np.ndarray
    title_pooled: np.ndarray
    image_pooled: np.ndarray
    fused_in: np.ndarray
    unit: np.ndarray
    norm: np.ndarray


def product_forward(params: EncoderParams, pool: np.ndarray, patches: np.ndarray) -> tuple[np.ndarray, ProductCache]:
    title_pooled = pool @ params.token_emb
    image_pooled = (patches @ params.patch_proj).mean(axis=1)
    fused_in = title_pooled @ params.title_proj + image_pooled @ params.image_proj
    v, norm = l2_normalize(fused_in @ params.fuse_proj)
    return v, ProductCache(pool, patches, title_pooled, image_pooled, fused_in, v, norm)


def product_backward(params: EncoderParams, cache: ProductCache, dv: np.ndarray, grads: EncoderParams) -> None:
    dz = l2_normalize_backward(cache.unit, cache.norm, dv)
    grads.fuse_proj += cache.fused_in.T @ dz
    ds = dz @ params.fuse_proj.T
    grads.title_proj += cache.title_pooled.T @ ds
    grads.token_emb += cache.pool.T @ (ds @ params.title_proj.T)
    grads.image_proj += cache.image_pooled.T @ ds
    d_image = ds @ params.image_proj.T  # (B, D), spread evenly over L patches
    L = cache.patches.shape[1]
    grads.patch_proj += cache.patches.sum(axis=1).T @ d_image / L


def encode_products(params: EncoderParams, products: Sequence[Product], vocab: Mapping[str, int], chunk: int = 4096) -> np.ndarray:
    """Unit-norm product embeddings, shape (N, D), in ``products`` order."""
    out = np.empty((len(products), params.dim))
    for start in range(0, len(products), chunk):
        part = products[start:start + chunk]
        pool = pooling_matrix([p.title_tokens for p in part], vocab)
        out[start:start + len(part)], _ = product_forward(params, pool, stack_patches(part, params))
    return out


def encode_product(params: EncoderParams, product: Product, vocab: Mapping[str, int]) -> np.ndarray:
    return encode_products(params, [product], vocab)[0]


# ---------------------------------------------------------------------------
# masked patch modeling


@dataclass
class MaskedBatch:
    inputs: np.ndarray  # (N, L, D) projected patches, masked slots = mask_emb
    targets: np.ndarray  # (N_mask, D) pre-mask projected patches
    mask_positions: list[tuple[int, int]]
    mask: np.ndarray  # (N, L) bool
    patches: np.ndarray  # (N, L, D_img) raw features, kept for backward

    @property
    def n_mask(self) -> int:
        return len(self.mask_positions)


def draw_mask(n: int, length: int, mask_rate: float, rng: np.random.Generator, max_redraws: int = 100) -> np.ndarray:
    if not 0.0 < mask_rate < 1.0:
        raise MaskConfigError(f"mask_rate must be in (0, 1), got {mask_rate}")
    for _ in range(max_redraws):
        mask = rng.random((n, length)) < mask_rate
        if mask.any() and (length == 1 or not mask.all(axis=1).any()):
            return mask
    # rate too small to ever hit: force exactly one masked slot
    mask = np.zeros((n, length), dtype=bool)
    mask[rng.integers(n), rng.integers(length)] = True
    return mask


def mask_patches(
    params: EncoderParams,
    batch: Sequence[Product] | np.ndarray,
    mask_rate: float,
    seed: int | np.random.Generator,
) -> MaskedBatch:
    """Project patch features and mask positions independently at ``mask_rate``.

    Draws are repeated until at least one slot is masked and no sample is
    entirely masked.

    Args:
        params: encoder parameters (``patch_proj`` and ``mask_emb`` are used).
        batch: products, or a raw (N, L, D_img) patch array.
        mask_rate: per-position masking probability in (0, 1).
        seed: integer seed or a generator to draw from.
    """
    patches = batch if isinstance(batch, np.ndarray) else stack_patches(batch, params)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = draw_mask(patches.shape[0], patches.shape[1], mask_rate, rng)
    projected = patches @ params.patch_proj
    inputs = np.where(mask[..., None], params.mask_emb, projected)
    positions = [(int(i), int(j)) for i, j in zip(*np.nonzero(mask))]
    return MaskedBatch(inputs, projected[mask], positions, mask, patches)


@dataclass
class PredictCache:
    mixed_in: np.ndarray  # (N, L, 2D)


def predict_forward(params: EncoderParams, masked: MaskedBatch) -> tuple[np.ndarray, PredictCache]:
    x = masked.inputs
    if x.shape[1] != params.num_patches or x.shape[2] != params.dim:
        raise ShapeError(f"masked inputs shape {x.shape} does not match params")
    context = np.broadcast_to(x.mean(axis=1, keepdims=True), x.shape)
    mixed_in = np.concatenate([x, context], axis=-1)
    pred = np.matmul(mixed_in.transpose(1, 0, 2), params.mix_proj).transpose(1, 0, 2)
    return pred, PredictCache(mixed_in)


def predict_masked(params: EncoderParams, masked: MaskedBatch) -> np.ndarray:
    """Predicted embeddings for every position, shape (N, L, D)."""
    return predict_forward(params, masked)[0]


def predict_backward(
    params: EncoderParams,
    masked: MaskedBatch,
    cache: PredictCache,
    d_pred: np.ndarray,
    d_targets: np.ndarray | None,
    grads: EncoderParams,
) -> None:
    """Accumulate gradients of the prediction grid and (optionally) the targets."""
    D = params.dim
    L = masked.inputs.shape[1]
    d_pred_l = d_pred.transpose(1, 0, 2)  # (L, N, D)
    grads.mix_proj += np.matmul(cache.mixed_in.transpose(1, 2, 0), d_pred_l)
    d_mixed = np.matmul(d_pred_l, params.mix_proj.transpose(0, 2, 1)).transpose(1, 0, 2)
    d_inputs = d_mixed[..., :D] + d_mixed[..., D:].sum(axis=1, keepdims=True) / L
    mask = masked.mask
    grads.mask_emb += d_inputs[mask].sum(axis=0)
    d_projected = np.where(mask[..., None], 0.0, d_inputs)
    if d_targets is not None:
        d_projected[mask] += d_targets
    Di = masked.patches.shape[-1]
    grads.patch_proj += masked.patches.reshape(-1, Di).T @ d_projected.reshape(-1, D)


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(params: EncoderParams, path: str | Path, vocab_fp: int = 0) -> None:
    """Write ``MMR1`` + header then every block as little-endian float32."""
    header = _HEADER.pack(
        CHECKPOINT_MAGIC, params.dim, params.patch_dim, params.vocab_size, params.num_patches, vocab_fp
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for _, arr in params.blocks():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, int]:
    """Returns the parameters (as float64) and the stored vocabulary fingerprint."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, D, Di, V, L, fp = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    shapes = [
        ("token_emb", (V, D)),
        ("patch_proj", (Di, D)),
        ("query_proj", (D, D)),
        ("title_proj", (D, D)),
        ("image_proj", (D, D)),
        ("fuse_proj", (D, D)),
        ("mask_emb", (D,)),
        ("mix_proj", (L, 2 * D, D)),
        ("log_tau", (1,)),
    ]
    offset = _HEADER.size
    arrays = {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        if offset + 4 * count > len(data):
            raise CheckpointError(f"{path}: truncated at {name}")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 4 * count
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return EncoderParams(**arrays), fp
