"""Sampled Hit@K, AUC, and the one-epoch overfitting detector."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np
from scipy.stats import rankdata

from .core_types import InvalidArgument, Split


class UndefinedMetric(ValueError):
    pass


class Stage(enum.Enum):
    PRETRAIN = "pretrain"
    DOWNSTREAM = "downstream"


@dataclass(frozen=True)
class EpochMetrics:
    arm: str
    stage: Stage
    epoch: int
    split: Split
    hit_at_k: float
    auc: float
    logloss: float
    seed: int
    k: int = 3

    def values(self) -> dict:
        return {f"hit_at_{self.k}": self.hit_at_k, "auc": self.auc, "logloss": self.logloss}


def sample_candidates(
    pos_items: np.ndarray, n_items: int, n_candidates: int, seed: int
) -> np.ndarray:
    """(n_pairs, n_candidates) id matrix, positive in column 0.

    The other columns are distinct items != the positive, drawn uniformly
    without replacement.  Depends only on (pos_items, n_items, seed).
    """
    pos_items = np.asarray(pos_items, dtype=np.int64)
    n_neg = n_candidates - 1
    if n_candidates < 1:
        raise InvalidArgument("n_candidates must be >= 1")
    if n_candidates > n_items:
        raise InvalidArgument(
            f"n_candidates={n_candidates} exceeds item cardinality {n_items}"
        )
    rng = np.random.default_rng([seed, 77])
    n = pos_items.size
    # draw from [0, n_items - 1) and shift past the positive: uniform over others
    if n_neg * 20 > n_items:
        # dense regime: random keys, keep the n_neg smallest per row
        draws = np.empty((n, n_neg), dtype=np.int64)
        for lo in range(0, n, 1024):
            keys = rng.random((min(1024, n - lo), n_items - 1))
            draws[lo : lo + 1024] = np.argsort(keys, axis=1)[:, :n_neg]
    else:
        draws = rng.integers(0, n_items - 1, size=(n, n_neg))
        bad = _rows_with_duplicates(draws)
        while bad.size:
            draws[bad] = rng.integers(0, n_items - 1, size=(bad.size, n_neg))
            bad = bad[_rows_with_duplicates(draws[bad])]
    draws += draws >= pos_items[:, None]
    return np.concatenate([pos_items[:, None], draws], axis=1)


def _rows_with_duplicates(m: np.ndarray) -> np.ndarray:
    if m.shape[1] < 2:
        return np.empty(0, dtype=np.int64)
    s = np.sort(m, axis=1)
    return np.flatnonzero(np.any(s[:, 1:] == s[:, :-1], axis=1))


def hit_at_k_from_scores(scores: np.ndarray, k: int) -> float:
    """Scores of shape (n_pairs, n_candidates), positive in column 0.

    A pair hits when fewer than ``k`` candidates score >= the positive, so
    ties go against the positive.
    """
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    scores = np.asarray(scores)
    if k > scores.shape[1]:
        raise InvalidArgument("k exceeds n_candidates")
    if scores.shape[0] == 0:
        return 0.0
    ahead = np.sum(scores[:, 1:] >= scores[:, :1], axis=1)
    return float(np.mean(ahead < k))


def hit_at_k(
    scorer: Callable[[np.ndarray, np.ndarray], np.ndarray],
    users: np.ndarray,
    items: np.ndarray,
    k: int,
    n_candidates: int,
    n_items: int,
    seed: int,
    candidates: np.ndarray = None,
    chunk: int = 4096,
) -> float:
    """Mean Hit@k of positives ``(users[i], items[i])`` among sampled candidates.

    ``scorer(user_ids, item_ids)`` takes broadcastable id arrays.  Pass a
    precomputed ``candidates`` matrix to reuse it across epochs.
    """
    if k < 1 or n_candidates < k:
        raise InvalidArgument("need 1 <= k <= n_candidates")
    users = np.asarray(users, dtype=np.int64)
    if candidates is None:
        candidates = sample_candidates(items, n_items, n_candidates, seed)
    hits = 0.0
    for lo in range(0, len(users), chunk):
        u = users[lo : lo + chunk, None]
        c = candidates[lo : lo + chunk]
        s = scorer(np.broadcast_to(u, c.shape), c)
        hits += hit_at_k_from_scores(s, k) * len(c)
    return hits / max(len(users), 1)


def auc(logits, labels) -> float:
    """Rank-sum AUC with ties counted as one half."""
    s = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks handle ties
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(logits, labels) -> float:
    s = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, np.where(y == 1.0, -s, s))))


@dataclass(frozen=True)
class OverfitReport:
    peak_epoch: int
    peak: float
    final: float
    degradation: float
    verdict: bool


def detect_one_epoch_overfit(
    series: Sequence, min_epochs: int = 2, threshold: float = 0.005
) -> OverfitReport:
    """Does holdout Hit@K peak within one pass and then fall by > threshold?

    ``series`` is a list of :class:`EpochMetrics` or of plain floats; plain
    floats are read as epochs 1, 2, ...  An epoch-0 record counts as "peak
    within one pass" too.
    """
    if min_epochs < 2:
        raise InvalidArgument("min_epochs must be >= 2")
    if series and isinstance(series[0], EpochMetrics):
        epochs = [m.epoch for m in series]
        vals = [m.hit_at_k for m in series]
    else:
        vals = [float(v) for v in series]
        epochs = list(range(1, len(vals) + 1))
    trained = [e for e in epochs if e >= 1]
    if len(trained) < min_epochs:
        raise InvalidArgument(
            f"series has {len(trained)} trained epochs, need {min_epochs}"
        )
    best = int(np.argmax(vals))  # first occurrence on ties
    peak, final = vals[best], vals[-1]
    degradation = peak - final
    verdict = epochs[best] <= 1 and degradation > threshold
    return OverfitReport(epochs[best], peak, final, degradation, bool(verdict))
