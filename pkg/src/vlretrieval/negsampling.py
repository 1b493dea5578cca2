"""Memory-bank queue and simulated cross-device gather.

Both pools are switched on late in training: cross-device negatives from
``cdns_start_frac`` of all steps, the memory bank from ``mbns_start_frac``.
The bank is filled from the first step so it is already full when it is
switched on.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from vlretrieval.losses import CDNS_WEIGHT, MBNS_WEIGHT, NegativeSets


@dataclass(frozen=True)
class EmbeddingBatch:
    """Detached snapshot of a mini-batch of product embeddings."""

    embeddings: np.ndarray  # (B, D)
    probs: np.ndarray  # (B,)
    ids: np.ndarray  # (B,)

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64, copy=True)
        probs = np.array(self.probs, dtype=np.float64, copy=True)
        ids = np.array(self.ids, dtype=np.int64, copy=True)
        if emb.ndim != 2 or len(emb) != len(probs) or len(emb) != len(ids):
            raise ValueError("embeddings, probs and ids must have matching lengths")
        for arr in (emb, probs, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def concat(cls, batches: Sequence["EmbeddingBatch"], dim: int) -> "EmbeddingBatch":
        if not batches:
            return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0, dtype=np.int64))
        return cls(
            np.concatenate([b.embeddings for b in batches]),
            np.concatenate([b.probs for b in batches]),
            np.concatenate([b.ids for b in batches]),
        )


class MemoryBank:
    """FIFO of the last ``capacity_batches`` mini-batches.

    Capacity counts whole batches. ``capacity_batches=0`` keeps nothing.
    """

    def __init__(self, capacity_batches: int):
        if capacity_batches < 0:
            raise ValueError("capacity_batches must be >= 0")
        self.capacity_batches = capacity_batches
        self.queue: deque[EmbeddingBatch] = deque()

    @property
    def current_size(self) -> int:
        return sum(len(b) for b in self.queue)

    def __len__(self) -> int:
        return len(self.queue)

    def push(self, batch: EmbeddingBatch) -> "MemoryBank":
        if len(batch) == 0:
            raise ValueError("cannot push an empty batch")
        if self.capacity_batches == 0:
            return self
        self.queue.append(batch)
        while len(self.queue) > self.capacity_batches:
            self.queue.popleft()
        return self

    def contents(self, dim: int) -> EmbeddingBatch:
        return EmbeddingBatch.concat(list(self.queue), dim)


@dataclass
class DeviceGroup:
    """Current-step product batches of G logical devices."""

    batches: list[EmbeddingBatch] = field(default_factory=list)

    @property
    def n_devices(self) -> int:
        return len(self.batches)

    def others(self, device: int, dim: int) -> EmbeddingBatch:
        return EmbeddingBatch.concat([b for g, b in enumerate(self.batches) if g != device], dim)


@dataclass(frozen=True)
class Schedule:
    total_steps: int
    cdns_start_frac: float = 0.5
    mbns_start_frac: float = 0.6

    def __post_init__(self):
        for name in ("cdns_start_frac", "mbns_start_frac"):
            frac = getattr(self, name)
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {frac}")

    def cdns_active(self, step: int) -> bool:
        return step >= self.cdns_start_frac * self.total_steps

    def mbns_active(self, step: int) -> bool:
        return step >= self.mbns_start_frac * self.total_steps


@dataclass
class NegativePool:
    """Candidates for one device, plus the counts N1 (bank) and N2 (cross-device)."""

    batch: EmbeddingBatch
    log_weights: np.ndarray
    n1: int
    n2: int


def gather_pool(
    bank: MemoryBank,
    group: DeviceGroup,
    device: int,
    step: int,
    schedule: Schedule,
    dim: int,
    w1: float = MBNS_WEIGHT,
    w2: float = CDNS_WEIGHT,
) -> NegativePool:
    """All schedule-active negatives for ``device`` at ``step``, before per-pair exclusion."""
    cdns = group.others(device, dim) if schedule.cdns_active(step) else EmbeddingBatch.concat([], dim)
    mbns = bank.contents(dim) if schedule.mbns_active(step) else EmbeddingBatch.concat([], dim)
    parts, weights = [], []
    if len(mbns) and w1 > 0:
        parts.append(mbns)
        weights.append(np.full(len(mbns), np.log(w1)))
    if len(cdns) and w2 > 0:
        parts.append(cdns)
        weights.append(np.full(len(cdns), np.log(w2)))
    batch = EmbeddingBatch.concat(parts, dim)
    log_w = np.concatenate(weights) if weights else np.zeros(0)
    return NegativePool(batch, log_w, len(mbns), len(cdns))


def sample_negatives(
    bank: MemoryBank,
    group: DeviceGroup,
    step: int,
    schedule: Schedule,
    positive_id: int,
    device: int = 0,
    w1: float = MBNS_WEIGHT,
    w2: float = CDNS_WEIGHT,
) -> NegativeSets:
    """Negative sets for one positive pair living on ``device``.

    ``cdns`` is every other device's current batch minus the positive product
    itself; ``mbns`` is the whole bank. Each is empty before its start step.
    """
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    dim = _infer_dim(bank, group)
    if schedule.cdns_active(step):
        cdns = group.others(device, dim)
        keep = cdns.ids != positive_id
        cdns_emb, cdns_probs = cdns.embeddings[keep], cdns.probs[keep]
    else:
        cdns_emb, cdns_probs = np.zeros((0, dim)), np.zeros(0)
    if schedule.mbns_active(step):
        mbns = bank.contents(dim)
        mbns_emb, mbns_probs = mbns.embeddings, mbns.probs
    else:
        mbns_emb, mbns_probs = np.zeros((0, dim)), np.zeros(0)
    return NegativeSets(mbns_emb, mbns_probs, cdns_emb, cdns_probs, w1=w1, w2=w2)


def _infer_dim(bank: MemoryBank, group: DeviceGroup) -> int:
    for b in list(bank.queue) + group.batches:
        return b.embeddings.shape[1]
    return 0
