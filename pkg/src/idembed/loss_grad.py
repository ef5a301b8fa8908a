"""Sampled-softmax contrastive loss with in-batch and uniform negatives, and BCE.

Both losses come with hand-written backward passes.  Scores are dot products
divided by a learned temperature ``tau = clamp(exp(theta), tau_min, tau_max)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .core_types import ContractError, EmbeddingTable, InvalidArgument, NumericError


@dataclass
class Temperature:
    theta: float = 0.0
    tau_min: float = 0.01
    tau_max: float = 10.0

    def __post_init__(self):
        if not (0 < self.tau_min < self.tau_max):
            raise InvalidArgument("need 0 < tau_min < tau_max")

    @classmethod
    def from_tau(cls, tau: float, tau_min: float = 0.01, tau_max: float = 10.0):
        return cls(float(np.log(tau)), tau_min, tau_max)

    @property
    def raw(self) -> float:
        return float(np.exp(self.theta))

    @property
    def tau(self) -> float:
        return float(np.clip(self.raw, self.tau_min, self.tau_max))

    @property
    def clamped(self) -> bool:
        raw = self.raw
        return raw < self.tau_min or raw > self.tau_max


@dataclass
class ContrastiveBatch:
    user_vecs: np.ndarray  # (B, d)
    pos_vecs: np.ndarray  # (B, d)
    uniform_neg_vecs: np.ndarray  # (M, d)
    in_batch_mask: np.ndarray  # (B, B) bool; [i, j] -> row j's positive is a negative for row i
    pos_ids: Optional[np.ndarray] = None
    uniform_neg_ids: Optional[np.ndarray] = None
    user_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        B, d = self.user_vecs.shape
        if self.pos_vecs.shape != (B, d):
            raise InvalidArgument("pos_vecs shape must match user_vecs")
        if self.uniform_neg_vecs.ndim != 2 or self.uniform_neg_vecs.shape[1] != d:
            raise InvalidArgument("uniform_neg_vecs must be (M, d)")
        if self.in_batch_mask.shape != (B, B):
            raise InvalidArgument("in_batch_mask must be (B, B)")
        if np.any(np.diag(self.in_batch_mask)):
            raise InvalidArgument("in_batch_mask diagonal must be false")

    @property
    def neg_count(self) -> np.ndarray:
        """Per-row N: uniform negatives plus unmasked in-batch positives."""
        return self.uniform_neg_vecs.shape[0] + self.in_batch_mask.sum(axis=1)


@dataclass
class LossGrad:
    loss: float
    d_user: np.ndarray
    d_pos: np.ndarray
    d_uniform_neg: np.ndarray
    d_theta: float


@dataclass
class _ContrastiveCache:
    batch: ContrastiveBatch
    tau: float
    clamped: bool
    pos_logit: np.ndarray  # (B,)
    ib_logits: np.ndarray  # (B, B), -inf where masked
    un_logits: np.ndarray  # (B, M)
    q_pos: np.ndarray
    q_ib: np.ndarray
    q_un: np.ndarray
    loss: float
    used: bool = False


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite embedding input")


def contrastive_forward(batch: ContrastiveBatch, temp: Temperature):
    """Mean over rows of -log softmax(positive | positive + negatives)."""
    U = np.asarray(batch.user_vecs, dtype=np.float64)
    P = np.asarray(batch.pos_vecs, dtype=np.float64)
    Nu = np.asarray(batch.uniform_neg_vecs, dtype=np.float64)
    _check_finite(U, P, Nu)
    tau = temp.tau
    B = U.shape[0]

    pos = np.einsum("ij,ij->i", U, P) / tau
    ib = (U @ P.T) / tau
    ib = np.where(batch.in_batch_mask, ib, -np.inf)
    un = (U @ Nu.T) / tau

    top = np.maximum(pos, ib.max(axis=1, initial=-np.inf))
    if un.shape[1]:
        top = np.maximum(top, un.max(axis=1))
    e_pos = np.exp(pos - top)
    e_ib = np.exp(ib - top[:, None])
    e_un = np.exp(un - top[:, None])
    z = e_pos + e_ib.sum(axis=1) + e_un.sum(axis=1)
    row_loss = np.log(z) + top - pos
    # degenerate N = 0 rows give exactly 0 and clean gradients
    row_loss = np.where(batch.neg_count == 0, 0.0, np.maximum(row_loss, 0.0))
    loss = float(row_loss.mean())
    cache = _ContrastiveCache(
        batch, tau, temp.clamped, pos, ib, un,
        e_pos / z, e_ib / z[:, None], e_un / z[:, None], loss,
    )
    return loss, cache


def contrastive_backward(cache: _ContrastiveCache) -> LossGrad:
    if not isinstance(cache, _ContrastiveCache):
        raise ContractError("cache did not come from contrastive_forward")
    if cache.used:
        raise ContractError("cache already consumed by a backward pass")
    cache.used = True
    batch = cache.batch
    U = np.asarray(batch.user_vecs, dtype=np.float64)
    P = np.asarray(batch.pos_vecs, dtype=np.float64)
    Nu = np.asarray(batch.uniform_neg_vecs, dtype=np.float64)
    B = U.shape[0]
    tau = cache.tau

    g_pos = (cache.q_pos - 1.0) / B  # dL/d(pos logit)
    g_ib = cache.q_ib / B
    g_un = cache.q_un / B
    dead = batch.neg_count == 0
    if np.any(dead):
        g_pos = np.where(dead, 0.0, g_pos)
        g_ib = np.where(dead[:, None], 0.0, g_ib)
        g_un = np.where(dead[:, None], 0.0, g_un)

    d_user = (g_pos[:, None] * P + g_ib @ P + g_un @ Nu) / tau
    d_pos = (g_pos[:, None] * U + g_ib.T @ U) / tau
    d_un = (g_un.T @ U) / tau
    if cache.clamped:
        d_theta = 0.0
    else:
        # logit z = s / tau, dz/dtheta = -z since dtau/dtheta = tau
        ib = np.where(batch.in_batch_mask, cache.ib_logits, 0.0)
        d_theta = -float(
            np.sum(g_pos * cache.pos_logit) + np.sum(g_ib * ib) + np.sum(g_un * cache.un_logits)
        )
    return LossGrad(cache.loss, d_user, d_pos, d_un, d_theta)


def in_batch_mask(pos_ids: np.ndarray) -> np.ndarray:
    """True where row j's item is a usable negative for row i."""
    pos_ids = np.asarray(pos_ids)
    return pos_ids[None, :] != pos_ids[:, None]


def assemble_batch(
    user_ids: np.ndarray,
    item_ids: np.ndarray,
    user_table: EmbeddingTable,
    item_table: EmbeddingTable,
    n_uniform: int,
    rng: np.random.Generator,
) -> ContrastiveBatch:
    """Gather embeddings for B positive pairs plus ``n_uniform`` shared negatives.

    Uniform negatives are drawn over the whole item space and may collide with
    a row's positive.
    """
    user_ids = np.asarray(user_ids, dtype=np.int64)
    item_ids = np.asarray(item_ids, dtype=np.int64)
    if user_ids.size == 0:
        raise InvalidArgument("batch must contain at least one event")
    if n_uniform < 0:
        raise InvalidArgument("n_uniform must be >= 0")
    neg_ids = rng.integers(0, item_table.cardinality, size=n_uniform)
    user_table.id_space.check(user_ids)
    item_table.id_space.check(item_ids)
    return ContrastiveBatch(
        user_table.rows[user_ids],
        item_table.rows[item_ids],
        item_table.rows[neg_ids],
        in_batch_mask(item_ids),
        pos_ids=item_ids,
        uniform_neg_ids=neg_ids,
        user_ids=user_ids,
    )


def bce_forward_backward(user_vecs, item_vecs, labels, tau: float = 1.0):
    """Mean binary cross-entropy on logits ``u.v / tau``.

    Returns ``(loss, d_user, d_item)``.
    """
    U = np.asarray(user_vecs, dtype=np.float64)
    V = np.asarray(item_vecs, dtype=np.float64)
    y = np.asarray(labels)
    if U.shape != V.shape or U.shape[0] != y.shape[0]:
        raise InvalidArgument("user_vecs, item_vecs and labels must have equal rows")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidArgument("labels must be 0 or 1")
    _check_finite(U, V)
    y = y.astype(np.float64)
    s = np.einsum("ij,ij->i", U, V) / tau
    loss, g = bce_with_logits(s, y)
    g = g / tau
    return loss, g[:, None] * V, g[:, None] * U


def bce_with_logits(logits: np.ndarray, labels: np.ndarray):
    """Mean BCE and its gradient with respect to each logit."""
    s = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    # softplus of the signed margin; no cancellation for large |s|
    per_row = np.logaddexp(0.0, np.where(y == 1.0, -s, s))
    n = max(len(s), 1)
    return float(per_row.sum() / n), (expit(s) - y) / n
