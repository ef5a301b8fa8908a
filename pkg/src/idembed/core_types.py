"""ID spaces, embedding tables and engagement records."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


class InvalidArgument(ValueError):
    pass


class FrozenTableError(RuntimeError):
    """Raised when something tries to write to a frozen embedding table."""


class NumericError(FloatingPointError):
    pass


class ContractError(RuntimeError):
    """A cache or state object was used with inputs it does not belong to."""


class IdKind(enum.Enum):
    USER = "user"
    ITEM = "item"


class Surface(enum.IntEnum):
    HOMEFEED = 0
    RELATED_PINS = 1
    OTHER = 2


class Split(enum.Enum):
    TRAIN = "train"
    HOLDOUT = "holdout"


@dataclass(frozen=True)
class IdSpace:
    kind: IdKind
    cardinality: int

    def __post_init__(self):
        if int(self.cardinality) < 1:
            raise InvalidArgument(f"cardinality must be >= 1, got {self.cardinality}")

    def check(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cardinality):
            raise IndexError(
                f"{self.kind.value} id out of range [0, {self.cardinality})"
            )
        return ids


@dataclass
class EmbeddingTable:
    """Dense per-ID vectors stored as one contiguous row-major matrix."""

    id_space: IdSpace
    rows: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] != self.id_space.cardinality:
            raise InvalidArgument(
                f"rows shape {self.rows.shape} does not match cardinality "
                f"{self.id_space.cardinality}"
            )
        if self.rows.shape[1] < 1:
            raise InvalidArgument("dim must be >= 1")
        self.rows = np.ascontiguousarray(self.rows)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def cardinality(self) -> int:
        return self.id_space.cardinality

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.id_space, self.rows.copy(), self.frozen)

    def freeze(self) -> "EmbeddingTable":
        self.frozen = True
        return self


def new_table(
    id_space: IdSpace,
    dim: int,
    init_scale: float = 1.0,
    seed: int = 0,
    dtype=np.float32,
) -> EmbeddingTable:
    """Uniform init in +-init_scale/sqrt(dim).

    ``init_scale == 0`` is accepted and yields an all-zero table.
    """
    if dim < 1:
        raise InvalidArgument(f"dim must be >= 1, got {dim}")
    if init_scale < 0:
        raise InvalidArgument(f"init_scale must be >= 0, got {init_scale}")
    bound = init_scale / np.sqrt(dim)
    rng = np.random.default_rng(seed)
    rows = rng.uniform(-bound, bound, size=(id_space.cardinality, dim)).astype(dtype)
    return EmbeddingTable(id_space, rows)


def lookup(table: EmbeddingTable, ids) -> np.ndarray:
    ids = table.id_space.check(np.asarray(ids, dtype=np.int64).reshape(-1))
    return table.rows[ids]


def apply_row_delta(table: EmbeddingTable, id: int, delta) -> None:
    if table.frozen:
        raise FrozenTableError(f"{table.id_space.kind.value} table is frozen")
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (table.dim,):
        raise InvalidArgument(f"delta must have shape ({table.dim},)")
    if not np.all(np.isfinite(delta)):
        raise NumericError("non-finite delta")
    table.id_space.check(np.array([id]))
    table.rows[id] = (table.rows[id].astype(np.float64) + delta).astype(table.rows.dtype)


@dataclass(frozen=True)
class InteractionEvent:
    user_id: int
    item_id: int
    surface: Surface
    label: int = 1


@dataclass
class Dataset:
    """Columnar engagement log; row k is one :class:`InteractionEvent`."""

    users: np.ndarray
    items: np.ndarray
    surfaces: np.ndarray
    labels: np.ndarray = None
    split: Split = Split.TRAIN
    surface_set: frozenset = field(default_factory=lambda: frozenset(Surface))

    def __post_init__(self):
        self.users = np.ascontiguousarray(self.users, dtype=np.uint32)
        self.items = np.ascontiguousarray(self.items, dtype=np.uint32)
        self.surfaces = np.ascontiguousarray(self.surfaces, dtype=np.uint8)
        if self.labels is None:
            self.labels = np.ones(len(self.users), dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        n = len(self.users)
        if not (len(self.items) == len(self.surfaces) == len(self.labels) == n):
            raise InvalidArgument("column lengths differ")
        self.surface_set = frozenset(Surface(s) for s in self.surface_set)

    def __len__(self) -> int:
        return len(self.users)

    def __getitem__(self, k: int) -> InteractionEvent:
        return InteractionEvent(
            int(self.users[k]), int(self.items[k]), Surface(int(self.surfaces[k])),
            int(self.labels[k]),
        )

    def __iter__(self) -> Iterator[InteractionEvent]:
        for k in range(len(self)):
            yield self[k]

    @classmethod
    def from_events(
        cls, events: Sequence[InteractionEvent], split: Split = Split.TRAIN
    ) -> "Dataset":
        return cls(
            np.array([e.user_id for e in events], dtype=np.uint32),
            np.array([e.item_id for e in events], dtype=np.uint32),
            np.array([int(e.surface) for e in events], dtype=np.uint8),
            np.array([e.label for e in events], dtype=np.uint8),
            split=split,
            surface_set=frozenset(e.surface for e in events) or frozenset(Surface),
        )

    def subset(self, mask_or_index) -> "Dataset":
        return Dataset(
            self.users[mask_or_index], self.items[mask_or_index],
            self.surfaces[mask_or_index], self.labels[mask_or_index],
            split=self.split, surface_set=self.surface_set,
        )

    def pair_keys(self, n_items: int) -> np.ndarray:
        """Unique int64 key per (user, item) pair."""
        return self.users.astype(np.int64) * int(n_items) + self.items.astype(np.int64)

    def positive_pairs(self) -> set:
        pos = self.labels == 1
        return set(zip(self.users[pos].tolist(), self.items[pos].tolist()))
