"""Contrastive losses with analytic gradients.

``mpm_r_loss``: each masked patch target must pick out its own prediction
among all N*L predictions of the batch, at a trainable temperature.

``qpm_loss``: query-product softmax over the positive and two weighted
negative pools, on the popularity-corrected similarity
``s(u, v) = u.v - log p(v)``. Negatives are constants (no gradient).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TAU_MIN = 0.01
TAU_MAX = 10.0
MBNS_WEIGHT = 0.25
CDNS_WEIGHT = 1.0


class ContractError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class NoNegativesWarning(UserWarning):
    pass


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite input to loss")


@dataclass
class Temperature:
    """Positive temperature stored as ``log_tau``; the value is clamped to [0.01, 10]."""

    log_tau: float

    @classmethod
    def from_value(cls, tau: float) -> "Temperature":
        if not tau > 0:
            raise ContractError(f"tau must be positive, got {tau}")
        return cls(math.log(tau))

    @property
    def tau(self) -> float:
        return min(max(math.exp(self.log_tau), TAU_MIN), TAU_MAX)

    @property
    def clamped(self) -> bool:
        raw = math.exp(self.log_tau)
        return raw < TAU_MIN or raw > TAU_MAX

    def grad_log_tau(self, d_tau: float) -> float:
        # chain rule through exp; zero when the clamp is active
        return 0.0 if self.clamped else d_tau * self.tau


@dataclass
class MPMResult:
    loss: float
    d_targets: np.ndarray
    d_predictions: np.ndarray
    d_tau: float
    d_log_tau: float


def mpm_r_loss(
    targets: np.ndarray,
    predictions: np.ndarray,
    mask_positions: Sequence[tuple[int, int]],
    tau: Temperature,
    exclude_self: bool = False,
) -> MPMResult:
    """Masked-patch contrastive loss over the whole prediction grid.

    For target ``v_k`` at slot ``(i, j)`` the log-probability is
    ``v_k . vhat_ij / tau - logsumexp_{n,l}(v_k . vhat_nl / tau)`` and the loss
    is the negative mean over the ``N_mask`` targets.

    Args:
        targets: (N_mask, D) original embeddings at the masked slots.
        predictions: (N, L, D) predicted embeddings for every slot.
        mask_positions: ``(sample, position)`` of each target row.
        tau: temperature.
        exclude_self: leave each target's own slot out of the denominator
            (decoupled variant; the loss can then go negative). The default
            keeps it, as in standard InfoNCE.
    """
    targets = np.asarray(targets, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    n_mask = len(mask_positions)
    if n_mask == 0:
        raise ContractError("mpm_r_loss needs at least one masked position")
    if targets.shape[0] != n_mask:
        raise ContractError(f"{targets.shape[0]} targets for {n_mask} mask positions")
    N, L, D = predictions.shape
    if N * L < 2:
        raise ContractError("mpm_r_loss needs N*L >= 2")
    _check_finite(targets, predictions)

    t = tau.tau
    flat = predictions.reshape(N * L, D)
    own = np.array([i * L + j for i, j in mask_positions])
    sims = targets @ flat.T  # (N_mask, N*L)
    logits = sims / t
    rows = np.arange(n_mask)
    denom = logits
    if exclude_self:
        denom = logits.copy()
        denom[rows, own] = -np.inf
    lse = logsumexp(denom, axis=1)
    loss = float(np.mean(lse - logits[rows, own]))

    d_logits = np.exp(denom - lse[:, None])
    d_logits[rows, own] -= 1.0
    d_logits /= n_mask
    d_sims = d_logits / t
    d_targets = d_sims @ flat
    d_predictions = (d_sims.T @ targets).reshape(N, L, D)
    d_tau = float(np.sum(d_logits * (-sims / (t * t))))
    return MPMResult(loss, d_targets, d_predictions, d_tau, tau.grad_log_tau(d_tau))


def corrected_similarity(u: np.ndarray, v: np.ndarray, sample_prob: float) -> float:
    """``u . v - log(sample_prob)``."""
    if not sample_prob > 0:
        raise ValueError(f"sample_prob must be > 0, got {sample_prob}")
    return float(np.dot(u, v) - math.log(sample_prob))


@dataclass
class NegativeSets:
    mbns: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    mbns_probs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cdns: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    cdns_probs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    w1: float = MBNS_WEIGHT
    w2: float = CDNS_WEIGHT

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ContractError("negative-set weights must be non-negative")

    @property
    def n1(self) -> int:
        return len(self.mbns_probs)

    @property
    def n2(self) -> int:
        return len(self.cdns_probs)


@dataclass
class QPMResult:
    loss: float
    d_u: np.ndarray
    d_v_pos: np.ndarray


def _weighted_pool(emb: np.ndarray, probs: np.ndarray, weight: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    if weight == 0 or len(probs) == 0:
        return np.zeros((0, 0)), np.zeros(0), np.zeros(0)
    if np.any(probs <= 0):
        raise ValueError("negative sample_prob must be > 0")
    return np.asarray(emb, dtype=np.float64), np.log(probs), np.full(len(probs), math.log(weight))


def qpm_loss(u: np.ndarray, v_pos: np.ndarray, pos_prob: float, negatives: NegativeSets) -> QPMResult:
    """Weighted, popularity-corrected softmax loss for one query-product pair.

    ``loss = -log(e^s+ / (e^s+ + w1 sum_mbns e^s + w2 sum_cdns e^s))``,
    evaluated as a log-sum-exp. With no negatives at all the loss is 0 and a
    :class:`NoNegativesWarning` is issued.
    """
    u = np.asarray(u, dtype=np.float64)
    v_pos = np.asarray(v_pos, dtype=np.float64)
    if not pos_prob > 0:
        raise ValueError(f"sample_prob must be > 0, got {pos_prob}")
    _check_finite(u, v_pos)
    if negatives.n1 == 0 and negatives.n2 == 0:
        warnings.warn("qpm_loss called with no negatives; loss is 0", NoNegativesWarning, stacklevel=2)
        return QPMResult(0.0, np.zeros_like(u), np.zeros_like(v_pos))

    pools = [
        _weighted_pool(negatives.mbns, negatives.mbns_probs, negatives.w1),
        _weighted_pool(negatives.cdns, negatives.cdns_probs, negatives.w2),
    ]
    cand = [v_pos[None, :]] + [emb for emb, _, _ in pools if len(emb)]
    log_p = [np.array([math.log(pos_prob)])] + [lp for _, lp, _ in pools if len(lp)]
    log_w = [np.zeros(1)] + [lw for _, _, lw in pools if len(lw)]
    cand = np.concatenate(cand)
    log_p = np.concatenate(log_p)
    log_w = np.concatenate(log_w)
    _check_finite(cand)

    s = cand @ u - log_p
    z = s + log_w
    lse = float(logsumexp(z))
    loss = lse - s[0]
    soft = np.exp(z - lse)
    d_u = soft @ cand - v_pos
    d_v_pos = (soft[0] - 1.0) * u
    return QPMResult(float(loss), d_u, d_v_pos)


@dataclass
class BatchQPMResult:
    loss: float  # mean over the batch
    losses: np.ndarray
    d_u: np.ndarray
    d_v_pos: np.ndarray


def qpm_loss_batch(
    u: np.ndarray,
    v_pos: np.ndarray,
    pos_log_probs: np.ndarray,
    pos_ids: np.ndarray,
    cand: np.ndarray,
    cand_log_probs: np.ndarray,
    cand_ids: np.ndarray,
    cand_log_weights: np.ndarray,
) -> BatchQPMResult:
    """Vectorised :func:`qpm_loss` for B pairs sharing one candidate pool.

    Candidates whose id equals a row's positive id are dropped from that row.
    Gradients are for the mean loss and reach ``u`` and ``v_pos`` only.

    Args:
        u: (B, D) query embeddings.
        v_pos: (B, D) positive product embeddings.
        pos_log_probs: (B,) log sample_prob of the positives.
        pos_ids: (B,) positive product ids.
        cand: (C, D) negative candidates (treated as constants).
        cand_log_probs: (C,) their log sample_prob.
        cand_ids: (C,) their product ids.
        cand_log_weights: (C,) log of the pool weight (log w1 or log w2).
    """
    B = u.shape[0]
    _check_finite(u, v_pos, cand)
    s_pos = np.sum(u * v_pos, axis=1) - pos_log_probs
    if len(cand):
        s_neg = u @ cand.T - cand_log_probs[None, :]
        z_neg = s_neg + cand_log_weights[None, :]
        z_neg = np.where(cand_ids[None, :] == pos_ids[:, None], -np.inf, z_neg)
    else:
        z_neg = np.zeros((B, 0))
    z = np.concatenate([s_pos[:, None], z_neg], axis=1)
    lse = logsumexp(z, axis=1)
    losses = lse - s_pos
    soft = np.exp(z - lse[:, None])
    d_u = (soft[:, 1:] @ cand if len(cand) else 0.0) + (soft[:, :1] - 1.0) * v_pos
    d_v_pos = (soft[:, :1] - 1.0) * u
    return BatchQPMResult(float(losses.mean()), losses, d_u / B, d_v_pos / B)
