"""Row-sparse Adagrad for embedding tables and dense Adam for MLP weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .core_types import ContractError, EmbeddingTable, FrozenTableError, NumericError


def coalesce(ids: np.ndarray, grads: np.ndarray):
    """Sum duplicate-id gradient rows.  Returns sorted unique ids and summed rows.

    Summation for each id happens in order of first appearance, so results
    are reproducible for a fixed input order.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    grads = np.asarray(grads, dtype=np.float64)
    if ids.size == 0:
        return ids, np.zeros((0,) + grads.shape[1:], dtype=np.float64)
    order = np.argsort(ids, kind="stable")
    s = ids[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    return s[starts], np.add.reduceat(grads[order], starts, axis=0)


@dataclass
class SparseAdagradState:
    accumulator: np.ndarray  # same shape as the table, float64
    lr: float = 0.05
    eps: float = 1e-10

    @classmethod
    def for_table(cls, table: EmbeddingTable, lr: float = 0.05, eps: float = 1e-10):
        return cls(np.zeros(table.rows.shape, dtype=np.float64), lr, eps)


def sparse_adagrad_step(
    table: EmbeddingTable,
    state: SparseAdagradState,
    ids: np.ndarray,
    grads: np.ndarray,
    weight_decay: float = 0.0,
) -> None:
    """Lazy Adagrad: only rows listed in ``ids`` (and their state) change.

    ``ids`` may contain duplicates; their gradients are summed first.
    """
    if table.frozen:
        raise FrozenTableError(f"{table.id_space.kind.value} table is frozen")
    if state.accumulator.shape != table.rows.shape:
        raise ContractError("optimizer state does not belong to this table")
    if len(ids) == 0:
        return
    uniq, g = coalesce(ids, grads)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    table.id_space.check(uniq)
    rows = table.rows[uniq].astype(np.float64)
    if weight_decay:
        g = g + weight_decay * rows
    acc = state.accumulator[uniq] + g * g
    state.accumulator[uniq] = acc
    table.rows[uniq] = (rows - state.lr * g / (np.sqrt(acc) + state.eps)).astype(
        table.rows.dtype
    )


def dense_adagrad_step(
    table: EmbeddingTable, state: SparseAdagradState, grads: np.ndarray
) -> None:
    """Adagrad on every row; the reference the lazy version must agree with."""
    if table.frozen:
        raise FrozenTableError(f"{table.id_space.kind.value} table is frozen")
    g = np.asarray(grads, dtype=np.float64)
    state.accumulator += g * g
    rows = table.rows.astype(np.float64)
    table.rows[:] = (rows - state.lr * g / (np.sqrt(state.accumulator) + state.eps)).astype(
        table.rows.dtype
    )


@dataclass
class DenseAdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "DenseAdamState":
        return cls(
            [np.zeros_like(p, dtype=np.float64) for p in params],
            [np.zeros_like(p, dtype=np.float64) for p in params],
            **kw,
        )


def dense_adam_step(
    params: Sequence[np.ndarray], state: DenseAdamState, grads: Sequence[np.ndarray]
) -> None:
    """In-place bias-corrected Adam on a list of arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and state lengths differ")
    for p, g, m in zip(params, grads, state.m):
        if np.shape(p) != np.shape(g) or np.shape(p) != m.shape:
            raise ContractError(f"shape mismatch {np.shape(p)} vs {np.shape(g)}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
