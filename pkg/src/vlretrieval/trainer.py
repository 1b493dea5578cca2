"""Training loop: query-product matching + masked patch modeling.

Each step draws ``n_devices * batch_size`` query-product pairs, splits them
across the simulated devices, runs every device's forward pass, then builds
each device's negatives (its own in-batch products, the other devices'
products and its memory bank, subject to the schedule). Gradients are
averaged over devices in device order and applied with AdamW.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from vlretrieval import encoder as enc
from vlretrieval.catalog import Catalog, Product, Query, estimate_sample_probs, make_catalog
from vlretrieval.losses import CDNS_WEIGHT, MBNS_WEIGHT, Temperature, mpm_r_loss, qpm_loss_batch
from vlretrieval.negsampling import DeviceGroup, EmbeddingBatch, MemoryBank, Schedule, gather_pool

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 5
    steps: int | None = None  # overrides epochs when set
    batch_size: int = 32  # per device
    n_devices: int = 1
    bank_batches: int = 0  # memory-bank capacity M, in batches
    lr_peak: float = 1e-4
    warmup_frac: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    mask_rate: float = 0.25
    mpm_weight: float = 1.0
    qpm_weight: float = 1.0
    cdns_start_frac: float = 0.5
    mbns_start_frac: float = 0.6
    w1: float = MBNS_WEIGHT
    w2: float = CDNS_WEIGHT
    dim: int = 64
    tau_init: float = 0.1
    smoothing: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.batch_size < 1 or self.n_devices < 1:
            raise ConfigError("batch_size and n_devices must be >= 1")
        if self.bank_batches < 0:
            raise ConfigError("bank_batches must be >= 0")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must be in (0, 1), got {self.mask_rate}")

    @property
    def global_batch(self) -> int:
        return self.batch_size * self.n_devices


def _coerce(raw: str, annotation: str):
    if "int" in annotation and "float" not in annotation:
        return None if raw.lower() == "none" else int(raw)
    if "float" in annotation:
        return float(raw)
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments allowed) into a TrainConfig."""
    types = {f.name: str(f.type) for f in dataclasses.fields(TrainConfig)}
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        try:
            values[key] = _coerce(raw, types[key])
        except ValueError:
            raise ConfigError(f"line {line_no}: bad value {raw!r} for {key}") from None
    cfg = dataclasses.replace(base or TrainConfig(), **values)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warm-up to ``lr_peak`` over ``warmup_frac`` of the run, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    warm = config.warmup_frac * total_steps
    if step < warm:
        return config.lr_peak * step / warm
    return config.lr_peak * (total_steps - step) / (total_steps - warm)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticSpec:
    n_clusters: int = 8
    products_per_cluster: int = 64
    queries_per_product: int = 4
    eval_queries_per_product: int = 1
    vocab_size: int = 256  # topic words, split evenly over clusters
    noise: float = 0.1
    title_len: int = 6
    query_len: int = 3
    n_brands: int = 6
    num_patches: int = 16
    patch_dim: int = 8
    centroid_scale: float = 3.0


@dataclass
class SyntheticCorpus:
    catalog: Catalog
    interactions: list[tuple[int, int]]  # (qid, product id) from training queries
    train_pairs: list[tuple[Query, int]]
    eval_pairs: list[tuple[Query, int]]
    centroids: np.ndarray  # (n_clusters, patch_dim)
    cluster_of: dict[int, int]


def make_synthetic(spec: SyntheticSpec, seed: int = 0) -> SyntheticCorpus:
    """Clustered product corpus with click pairs.

    Cluster ``k`` owns a disjoint slice of topic words; titles draw
    ``title_len`` distinct words from their cluster and patches scatter around
    the cluster centroid with jitter of standard deviation ``noise``. Queries
    sample ``query_len`` words of the clicked product's title. With
    probability ``noise`` a title word is swapped for any vocabulary word and
    a query word for another title word of the same cluster, so the title
    vocabulary covers every query.
    """
    if min(spec.n_clusters, spec.products_per_cluster, spec.vocab_size, spec.title_len, spec.query_len) < 1:
        raise ConfigError("synthetic sizes must be positive")
    words_per_cluster = spec.vocab_size // spec.n_clusters
    if words_per_cluster < spec.title_len:
        raise ConfigError("vocab_size too small for title_len distinct words per cluster")
    if spec.query_len > spec.title_len:
        raise ConfigError("query_len cannot exceed title_len")
    rng = np.random.default_rng(seed)
    width = len(str(spec.vocab_size - 1))
    words = [f"w{i:0{width}d}" for i in range(words_per_cluster * spec.n_clusters)]
    centroids = rng.normal(0.0, spec.centroid_scale, size=(spec.n_clusters, spec.patch_dim))

    def noisy(tokens: list[str]) -> list[str]:
        out = []
        for t in tokens:
            out.append(words[rng.integers(len(words))] if rng.random() < spec.noise else t)
        return out

    products: list[Product] = []
    cluster_of: dict[int, int] = {}
    for k in range(spec.n_clusters):
        topic = words[k * words_per_cluster:(k + 1) * words_per_cluster]
        for _ in range(spec.products_per_cluster):
            pid = len(products)
            picks = rng.choice(len(topic), size=spec.title_len, replace=False)
            title = noisy([topic[i] for i in picks])
            patches = centroids[k] + spec.noise * rng.normal(size=(spec.num_patches, spec.patch_dim))
            products.append(
                Product(pid, tuple(title), patches, f"brand{rng.integers(spec.n_brands)}", f"cat{k}")
            )
            cluster_of[pid] = k

    title_words = {t for p in products for t in p.title_tokens}
    topics = [
        [w for w in words[k * words_per_cluster:(k + 1) * words_per_cluster] if w in title_words]
        for k in range(spec.n_clusters)
    ]

    def make_query(p: Product) -> Query:
        picks = rng.choice(len(p.title_tokens), size=spec.query_len, replace=False)
        tokens = [p.title_tokens[i] for i in sorted(picks)]
        topic = topics[cluster_of[p.id]]
        tokens = [topic[rng.integers(len(topic))] if rng.random() < spec.noise else t for t in tokens]
        rng.shuffle(tokens)
        return Query.from_raw(" ".join(tokens), constraints=(("category", p.category),))

    train_pairs, eval_pairs = [], []
    for p in products:
        train_pairs.extend((make_query(p), p.id) for _ in range(spec.queries_per_product))
        eval_pairs.extend((make_query(p), p.id) for _ in range(spec.eval_queries_per_product))
    interactions = [(q.qid, pid) for q, pid in train_pairs]
    catalog = estimate_sample_probs(make_catalog(products), interactions)
    return SyntheticCorpus(catalog, interactions, train_pairs, eval_pairs, centroids, cluster_of)


def parse_synthetic(text: str) -> SyntheticSpec:
    """``"8x64"`` -> 8 clusters of 64 products."""
    try:
        clusters, per = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"synthetic spec must look like 8x64, got {text!r}") from None
    return SyntheticSpec(n_clusters=clusters, products_per_cluster=per, vocab_size=max(256, 24 * clusters))


# ---------------------------------------------------------------------------
# training


@dataclass
class StepLog:
    step: int
    lr: float
    loss_qpm: float
    loss_mpm: float
    n1: int
    n2: int


@dataclass
class TrainLog:
    rows: list[StepLog] = field(default_factory=list)

    COLUMNS = ("step", "lr", "loss_qpm", "loss_mpm", "N1", "N2")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self.rows:
            writer.writerow([r.step, repr(r.lr), repr(r.loss_qpm), repr(r.loss_mpm), r.n1, r.n2])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


@dataclass
class TrainResult:
    params: enc.EncoderParams
    log: TrainLog
    total_steps: int


class AdamW:
    def __init__(self, params: enc.EncoderParams, beta1: float, beta2: float, eps: float, weight_decay: float):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: enc.EncoderParams, grads: enc.EncoderParams, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for (name, p), (_, g), (_, m), (_, v) in zip(params.blocks(), grads.blocks(), self.m.blocks(), self.v.blocks()):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _batch_stream(n_pairs: int, global_batch: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index batches; each epoch is a fresh permutation."""
    buf = np.zeros(0, dtype=np.int64)
    while True:
        while len(buf) < global_batch:
            buf = np.concatenate([buf, rng.permutation(n_pairs)])
        yield buf[:global_batch]
        buf = buf[global_batch:]


def total_steps_for(config: TrainConfig, n_pairs: int) -> int:
    if config.steps is not None:
        return config.steps
    return config.epochs * math.ceil(n_pairs / config.global_batch)


@dataclass
class _DeviceForward:
    ids: np.ndarray
    log_probs: np.ndarray
    u: np.ndarray
    q_cache: enc.QueryCache
    v: np.ndarray
    p_cache: enc.ProductCache
    patches: np.ndarray


def _forward_device(params, catalog, pairs, idx) -> _DeviceForward:
    products = [catalog[pairs[i][1]] for i in idx]
    q_pool = enc.pooling_matrix([pairs[i][0].tokens for i in idx], catalog.vocab)
    p_pool = enc.pooling_matrix([p.title_tokens for p in products], catalog.vocab)
    patches = enc.stack_patches(products, params)
    u, qc = enc.query_forward(params, q_pool)
    v, pc = enc.product_forward(params, p_pool, patches)
    ids = np.array([p.id for p in products], dtype=np.int64)
    log_probs = np.log(np.array([p.sample_prob for p in products]))
    return _DeviceForward(ids, log_probs, u, qc, v, pc, patches)


def train(
    catalog: Catalog,
    pairs: Sequence[tuple[Query, int]],
    config: TrainConfig,
    init: enc.EncoderParams | None = None,
    on_step: Callable[[int, enc.EncoderParams], None] | None = None,
) -> TrainResult:
    """Train encoders on ``(query, clicked product id)`` pairs.

    Args:
        catalog: products with a vocabulary covering every title and query token.
            Missing sample probabilities are estimated from ``pairs``.
        pairs: training clicks.
        config: hyper-parameters; ``steps`` overrides ``epochs``.
        init: starting parameters, defaults to ``init_params`` seeded by ``config.seed``.
        on_step: called as ``on_step(step, params)`` after every update.

    Raises:
        TrainingDivergedError: a loss became NaN/inf (carries the step).
    """
    config.validate()
    if not pairs:
        raise ConfigError("no training pairs")
    if not catalog.has_sample_probs():
        catalog = estimate_sample_probs(catalog, [(q.qid, pid) for q, pid in pairs], config.smoothing)
    sample = next(iter(catalog))
    params = init.copy() if init is not None else enc.init_params(
        len(catalog.vocab), config.dim, sample.patches.shape[1], sample.patches.shape[0],
        seed=config.seed, tau=config.tau_init,
    )
    params.validate()

    total = total_steps_for(config, len(pairs))
    schedule = Schedule(total, config.cdns_start_frac, config.mbns_start_frac)
    data_rng = np.random.default_rng([config.seed, 1])
    mask_rng = np.random.default_rng([config.seed, 2])
    stream = _batch_stream(len(pairs), config.global_batch, data_rng)
    banks = [MemoryBank(config.bank_batches) for _ in range(config.n_devices)]
    opt = AdamW(params, config.beta1, config.beta2, config.eps, config.weight_decay)
    train_log = TrainLog()
    G, B, D = config.n_devices, config.batch_size, params.dim

    for step in range(total):
        idx = next(stream)
        fwd = [_forward_device(params, catalog, pairs, idx[g * B:(g + 1) * B]) for g in range(G)]
        group = DeviceGroup([EmbeddingBatch(f.v, np.exp(f.log_probs), f.ids) for f in fwd])
        grads = params.zeros_like()
        qpm_total = mpm_total = 0.0
        n1 = n2 = 0

        for g, f in enumerate(fwd):
            pool = gather_pool(banks[g], group, g, step, schedule, D, config.w1, config.w2)
            if g == 0:
                n1, n2 = pool.n1, pool.n2
            # in-batch negatives ride in the cross-device pool at weight w2
            cand = np.concatenate([f.v, pool.batch.embeddings])
            cand_lp = np.concatenate([f.log_probs, np.log(pool.batch.probs)])
            cand_ids = np.concatenate([f.ids, pool.batch.ids])
            cand_lw = np.concatenate([np.full(B, math.log(config.w2) if config.w2 > 0 else -np.inf), pool.log_weights])
            qpm = qpm_loss_batch(f.u, f.v, f.log_probs, f.ids, cand, cand_lp, cand_ids, cand_lw)
            enc.query_backward(params, f.q_cache, config.qpm_weight * qpm.d_u, grads)
            enc.product_backward(params, f.p_cache, config.qpm_weight * qpm.d_v_pos, grads)
            qpm_total += qpm.loss

            if config.mpm_weight:
                masked = enc.mask_patches(params, f.patches, config.mask_rate, mask_rng)
                pred, p_cache = enc.predict_forward(params, masked)
                pred_n, pred_norm = enc.l2_normalize(pred)
                tgt_n, tgt_norm = enc.l2_normalize(masked.targets)
                tau = Temperature(float(params.log_tau[0]))
                mpm = mpm_r_loss(tgt_n, pred_n, masked.mask_positions, tau)
                w = config.mpm_weight
                d_pred = enc.l2_normalize_backward(pred_n, pred_norm, w * mpm.d_predictions)
                d_tgt = enc.l2_normalize_backward(tgt_n, tgt_norm, w * mpm.d_targets)
                enc.predict_backward(params, masked, p_cache, d_pred, d_tgt, grads)
                grads.log_tau[0] += w * mpm.d_log_tau
                mpm_total += mpm.loss

        qpm_mean, mpm_mean = qpm_total / G, mpm_total / G
        if not (math.isfinite(qpm_mean) and math.isfinite(mpm_mean)):
            raise TrainingDivergedError(step, "loss")
        for _, gblock in grads.blocks():
            gblock /= G
        lr = lr_at(config, step, total)
        opt.step(params, grads, lr)
        for g, f in enumerate(fwd):
            banks[g].push(group.batches[g])
        train_log.rows.append(StepLog(step, lr, qpm_mean, mpm_mean, n1, n2))
        if on_step is not None:
            on_step(step, params)
        if step % 500 == 0:
            log.debug("step %d lr %.3g qpm %.4f mpm %.4f N1 %d N2 %d", step, lr, qpm_mean, mpm_mean, n1, n2)

    for name, arr in params.blocks():
        if not np.all(np.isfinite(arr)):
            raise TrainingDivergedError(total, f"parameter {name}")
    return TrainResult(params, train_log, total)


def batch_loss(
    params: enc.EncoderParams,
    catalog: Catalog,
    pairs: Sequence[tuple[Query, int]],
    config: TrainConfig,
    mask_seed: int = 0,
) -> float:
    """Combined in-batch loss of one fixed batch (single device, no extra negatives)."""
    idx = np.arange(len(pairs))
    f = _forward_device(params, catalog, pairs, idx)
    cand_lw = np.full(len(idx), math.log(config.w2))
    qpm = qpm_loss_batch(f.u, f.v, f.log_probs, f.ids, f.v, f.log_probs, f.ids, cand_lw)
    total = config.qpm_weight * qpm.loss
    if config.mpm_weight:
        masked = enc.mask_patches(params, f.patches, config.mask_rate, mask_seed)
        pred_n, _ = enc.l2_normalize(enc.predict_masked(params, masked))
        tgt_n, _ = enc.l2_normalize(masked.targets)
        mpm = mpm_r_loss(tgt_n, pred_n, masked.mask_positions, Temperature(float(params.log_tau[0])))
        total += config.mpm_weight * mpm.loss
    return float(total)


def pairs_from_records(records: Sequence[dict]) -> list[tuple[Query, int]]:
    """``{"query": str, "product_id": int}`` records -> training pairs."""
    out = []
    for rec in records:
        out.append((Query.from_raw(rec["query"]), int(rec["product_id"])))
    return out

