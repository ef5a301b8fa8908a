"""Two-tower dot-product scorer and a small CTR MLP with manual backprop."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .core_types import (
    ContractError,
    EmbeddingTable,
    IdKind,
    IdSpace,
    InvalidArgument,
    new_table,
)
from .loss_grad import Temperature


class EmbeddingMode(enum.Enum):
    SCRATCH = "scratch"
    FROZEN = "frozen"
    FINETUNE = "finetune"


@dataclass
class TwoTowerModel:
    user_table: EmbeddingTable
    item_table: EmbeddingTable
    temp: Temperature = field(default_factory=Temperature)

    def __post_init__(self):
        if self.user_table.dim != self.item_table.dim:
            raise InvalidArgument("user and item tables must share dim")

    @classmethod
    def init(cls, n_users: int, n_items: int, dim: int, init_scale: float, seed: int):
        users = new_table(IdSpace(IdKind.USER, n_users), dim, init_scale, seed=[seed, 11])
        items = new_table(IdSpace(IdKind.ITEM, n_items), dim, init_scale, seed=[seed, 12])
        return cls(users, items, Temperature())

    @property
    def dim(self) -> int:
        return self.user_table.dim

    def copy(self) -> "TwoTowerModel":
        t = self.temp
        return TwoTowerModel(
            self.user_table.copy(), self.item_table.copy(),
            Temperature(t.theta, t.tau_min, t.tau_max),
        )


def two_tower_score(model: TwoTowerModel, user_ids, item_ids) -> np.ndarray:
    user_ids = np.asarray(user_ids, dtype=np.int64)
    item_ids = np.asarray(item_ids, dtype=np.int64)
    if user_ids.shape != item_ids.shape:
        raise InvalidArgument("user_ids and item_ids must have the same shape")
    model.user_table.id_space.check(user_ids)
    model.item_table.id_space.check(item_ids)
    u = model.user_table.rows[user_ids].astype(np.float64)
    p = model.item_table.rows[item_ids].astype(np.float64)
    return np.einsum("...j,...j->...", u, p)


@dataclass
class MlpParams:
    """Weights ``W[l]`` of shape (in, out) and biases ``b[l]`` per layer."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise InvalidArgument("one bias per weight matrix")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise InvalidArgument(f"bias {l} shape {b.shape} != ({w.shape[1]},)")
            if l and self.weights[l - 1].shape[1] != w.shape[0]:
                raise InvalidArgument(f"layer {l} input does not chain")

    @classmethod
    def init(cls, layer_dims, seed) -> "MlpParams":
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = np.sqrt(6.0 / fan_in)  # He-uniform for the rectifier
            ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(ws, bs)

    @property
    def layer_dims(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def flat(self) -> List[np.ndarray]:
        """Parameter arrays in optimizer order (W0, b0, W1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class DownstreamModel:
    user_table: EmbeddingTable
    item_table: EmbeddingTable
    mlp: MlpParams
    embedding_mode: EmbeddingMode = EmbeddingMode.SCRATCH

    def __post_init__(self):
        if self.user_table.dim != self.item_table.dim:
            raise InvalidArgument("user and item tables must share dim")
        if self.mlp.layer_dims[0] != 3 * self.user_table.dim:
            raise InvalidArgument("MLP input must be 3 * dim")
        if self.mlp.layer_dims[-1] != 1:
            raise InvalidArgument("MLP must end in a single logit")
        if self.embedding_mode is EmbeddingMode.FROZEN:
            self.user_table.freeze()
            self.item_table.freeze()

    @classmethod
    def init(
        cls,
        user_table: EmbeddingTable,
        item_table: EmbeddingTable,
        hidden=(64, 32),
        mode: EmbeddingMode = EmbeddingMode.SCRATCH,
        seed=0,
    ) -> "DownstreamModel":
        d = user_table.dim
        mlp = MlpParams.init([3 * d, *hidden, 1], seed)
        return cls(user_table, item_table, mlp, mode)

    @property
    def dim(self) -> int:
        return self.user_table.dim


@dataclass
class _CtrCache:
    model: DownstreamModel
    user_ids: np.ndarray
    item_ids: np.ndarray
    u: np.ndarray
    p: np.ndarray
    inputs: List[np.ndarray]  # input of each layer
    pre: List[np.ndarray]  # pre-activation of each layer


def ctr_forward(model: DownstreamModel, user_ids, item_ids):
    """Logits of MLP(concat(u, p, u*p)).  Returns ``(logits, cache)``."""
    user_ids = np.asarray(user_ids, dtype=np.int64).reshape(-1)
    item_ids = np.asarray(item_ids, dtype=np.int64).reshape(-1)
    if user_ids.shape != item_ids.shape:
        raise InvalidArgument("user_ids and item_ids must have equal length")
    model.user_table.id_space.check(user_ids)
    model.item_table.id_space.check(item_ids)
    u = model.user_table.rows[user_ids].astype(np.float64)
    p = model.item_table.rows[item_ids].astype(np.float64)
    h = np.concatenate([u, p, u * p], axis=1)
    inputs, pre = [], []
    last = len(model.mlp.weights) - 1
    for l, (w, b) in enumerate(zip(model.mlp.weights, model.mlp.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = z if l == last else np.maximum(z, 0.0)
    return h[:, 0], _CtrCache(model, user_ids, item_ids, u, p, inputs, pre)


def ctr_logits(model: DownstreamModel, user_ids, item_ids) -> np.ndarray:
    """Forward pass without keeping a cache; accepts any matching id shapes."""
    user_ids = np.asarray(user_ids, dtype=np.int64)
    item_ids = np.asarray(item_ids, dtype=np.int64)
    shape = np.broadcast_shapes(user_ids.shape, item_ids.shape)
    uid = np.broadcast_to(user_ids, shape).reshape(-1)
    iid = np.broadcast_to(item_ids, shape).reshape(-1)
    model.user_table.id_space.check(uid)
    model.item_table.id_space.check(iid)
    u = model.user_table.rows[uid].astype(np.float64)
    p = model.item_table.rows[iid].astype(np.float64)
    h = np.concatenate([u, p, u * p], axis=1)
    last = len(model.mlp.weights) - 1
    for l, (w, b) in enumerate(zip(model.mlp.weights, model.mlp.biases)):
        h = h @ w + b
        if l != last:
            np.maximum(h, 0.0, out=h)
    return h[:, 0].reshape(shape)


@dataclass
class CtrGrads:
    mlp: MlpParams
    d_user_rows: np.ndarray  # (n, d), aligned with the forward's user_ids
    d_item_rows: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray


def ctr_backward(cache: _CtrCache, dloss_dlogits) -> CtrGrads:
    """Reverse-mode gradients through MLP, concat and elementwise product.

    Embedding-row gradients are returned even for frozen tables; the frozen
    flag on the table stops them from being applied.
    """
    if not isinstance(cache, _CtrCache):
        raise ContractError("cache did not come from ctr_forward")
    g = np.asarray(dloss_dlogits, dtype=np.float64).reshape(-1, 1)
    if g.shape[0] != cache.u.shape[0]:
        raise ContractError("dloss_dlogits length does not match the cached batch")
    mlp = cache.model.mlp
    n_layers = len(mlp.weights)
    d_w: List[Optional[np.ndarray]] = [None] * n_layers
    d_b: List[Optional[np.ndarray]] = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        if l != n_layers - 1:
            g = g * (cache.pre[l] > 0)
        d_w[l] = cache.inputs[l].T @ g
        d_b[l] = g.sum(axis=0)
        g = g @ mlp.weights[l].T
    d = cache.u.shape[1]
    g_u, g_p, g_had = g[:, :d], g[:, d : 2 * d], g[:, 2 * d :]
    d_user = g_u + g_had * cache.p
    d_item = g_p + g_had * cache.u
    return CtrGrads(MlpParams(d_w, d_b), d_user, d_item, cache.user_ids, cache.item_ids)
