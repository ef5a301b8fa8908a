"""Seeded synthetic engagement data with Zipf item popularity.

Every user and item carries a latent topic mixture.  A user picks an item
with probability proportional to

    popularity[i] * exp(affinity_strength * <user_topics[u], item_topics[i]>)

so there is real structure to learn, while the popularity tail leaves most
items with only a handful of observations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, NamedTuple

import numpy as np

from .core_types import Dataset, InvalidArgument, Split, Surface

DEFAULT_SURFACE_MIX = {
    Surface.HOMEFEED: 0.5,
    Surface.RELATED_PINS: 0.3,
    Surface.OTHER: 0.2,
}

# distinct substreams of one seed
_STREAM_LATENT = 1
_STREAM_PRETRAIN = 2
_STREAM_DOWNSTREAM = 3
_STREAM_PRE_HOLDOUT = 4
_STREAM_DOWN_HOLDOUT = 5


@dataclass(frozen=True)
class GeneratorConfig:
    n_users: int = 20_000
    n_items: int = 50_000
    n_topics: int = 16
    zipf_exponent: float = 1.2
    affinity_strength: float = 4.0
    # Gamma shape of the i.i.d. draws that get normalized into topic mixtures;
    # small values give peaked (near one-hot) mixtures.
    topic_concentration: float = 0.1
    events_per_user: int = 5
    surface_mix: Dict[Surface, float] = field(
        default_factory=lambda: dict(DEFAULT_SURFACE_MIX)
    )
    coverage_ratio: float = 10.0
    holdout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_topics", "events_per_user"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if self.zipf_exponent <= 0:
            raise InvalidArgument("zipf_exponent must be > 0")
        if self.affinity_strength < 0:
            raise InvalidArgument("affinity_strength must be >= 0")
        if self.topic_concentration <= 0:
            raise InvalidArgument("topic_concentration must be > 0")
        if self.coverage_ratio < 1:
            raise InvalidArgument("coverage_ratio must be >= 1")
        if not 0 < self.holdout_fraction <= 1:
            raise InvalidArgument("holdout_fraction must be in (0, 1]")
        mix = np.array([self.surface_mix.get(s, 0.0) for s in Surface])
        if np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise InvalidArgument("surface_mix must be nonnegative and sum to 1")

    @property
    def n_downstream(self) -> int:
        return self.events_per_user * self.n_users

    @property
    def n_pretrain(self) -> int:
        return int(round(self.coverage_ratio * self.n_downstream))

    def with_seed(self, seed: int) -> "GeneratorConfig":
        return replace(self, seed=seed)


@dataclass
class LatentModel:
    user_topics: np.ndarray
    item_topics: np.ndarray
    item_popularity: np.ndarray

    @property
    def n_users(self) -> int:
        return self.user_topics.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_topics.shape[0]


class Corpora(NamedTuple):
    pretrain: Dataset
    downstream_train: Dataset
    downstream_holdout: Dataset
    pretrain_holdout: Dataset


def zipf_weights(n: int, s: float) -> np.ndarray:
    """Normalized rank weights ``r**-s`` for ranks 1..n."""
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    if not s > 0:
        raise InvalidArgument(f"s must be > 0, got {s}")
    w = np.arange(1, n + 1, dtype=np.float64) ** (-float(s))
    return w / math.fsum(w)


def _mixtures(rng: np.random.Generator, n: int, k: int, shape: float) -> np.ndarray:
    draws = rng.gamma(shape, 1.0, size=(n, k))
    # gamma(shape << 1) underflows to exact zero occasionally
    draws = np.maximum(draws, np.finfo(np.float64).tiny)
    return draws / draws.sum(axis=1, keepdims=True)


def build_latent_model(cfg: GeneratorConfig) -> LatentModel:
    rng = np.random.default_rng([cfg.seed, _STREAM_LATENT])
    user_topics = _mixtures(rng, cfg.n_users, cfg.n_topics, cfg.topic_concentration)
    item_topics = _mixtures(rng, cfg.n_items, cfg.n_topics, cfg.topic_concentration)
    pop = zipf_weights(cfg.n_items, cfg.zipf_exponent)
    pop = pop[rng.permutation(cfg.n_items)]
    return LatentModel(user_topics, item_topics, pop)


def _draw_items(
    model: LatentModel,
    affinity: float,
    users: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """One item per entry of ``users`` (which must be sorted).

    Rejection sampling against the popularity proposal.  The acceptance
    probability exp(a * (<t_u, t_i> - max_k t_u[k])) is <= 1 because item
    mixtures are probability vectors.
    """
    n_items = model.n_items
    cdf = np.cumsum(model.item_popularity)
    cdf /= cdf[-1]
    out = np.empty(len(users), dtype=np.int64)
    if affinity == 0.0:
        out[:] = np.minimum(np.searchsorted(cdf, rng.random(len(users)), side="right"),
                            n_items - 1)
        return out
    ceiling = model.user_topics.max(axis=1)
    pending = np.arange(len(users))
    while pending.size:
        # oversample proposals so most pending slots resolve in one pass
        reps = 8
        idx = np.repeat(pending, reps)
        u = users[idx]
        cand = np.minimum(np.searchsorted(cdf, rng.random(idx.size), side="right"),
                          n_items - 1)
        aff = np.einsum("ij,ij->i", model.user_topics[u], model.item_topics[cand])
        accept = rng.random(idx.size) < np.exp(affinity * (aff - ceiling[u]))
        acc_idx = idx[accept]
        acc_item = cand[accept]
        # first accepted proposal per slot, in proposal order
        slots, first = np.unique(acc_idx, return_index=True)
        out[slots] = acc_item[first]
        pending = np.setdiff1d(pending, slots, assume_unique=True)
    return out


def _surface_probs(cfg: GeneratorConfig, surfaces) -> np.ndarray:
    surfaces = frozenset(Surface(s) for s in surfaces)
    if not surfaces:
        raise InvalidArgument("surface set must be nonempty")
    probs = np.array([cfg.surface_mix.get(s, 0.0) if s in surfaces else 0.0
                      for s in Surface])
    if probs.sum() <= 0:
        # all requested surfaces have zero mass in the mix: split evenly
        probs = np.array([1.0 if s in surfaces else 0.0 for s in Surface])
    return probs / probs.sum()


def sample_events(
    model: LatentModel,
    cfg: GeneratorConfig,
    n_events: int,
    surfaces=frozenset(Surface),
    stream: int = _STREAM_PRETRAIN,
    split: Split = Split.TRAIN,
) -> Dataset:
    """Draw ``n_events`` positive engagements.

    Output order is canonical: sorted by user, then by draw index.
    """
    if n_events < 1:
        raise InvalidArgument("n_events must be >= 1")
    probs = _surface_probs(cfg, surfaces)
    rng = np.random.default_rng([cfg.seed, stream])
    counts = rng.multinomial(n_events, np.full(model.n_users, 1.0 / model.n_users))
    users = np.repeat(np.arange(model.n_users), counts)
    items = _draw_items(model, cfg.affinity_strength, users, rng)
    surf = rng.choice(len(Surface), size=n_events, p=probs)
    return Dataset(users, items, surf, split=split,
                   surface_set=frozenset(Surface(s) for s in surfaces))


def _holdout(
    model: LatentModel,
    cfg: GeneratorConfig,
    train: Dataset,
    n_target: int,
    surfaces,
    stream: int,
) -> Dataset:
    train_keys = np.unique(train.pair_keys(model.n_items))
    kept = []
    have = 0
    attempt = 0
    while have < n_target:
        ds = sample_events(model, cfg, max(2 * (n_target - have), 16), surfaces,
                           stream=stream * 1000 + attempt, split=Split.HOLDOUT)
        keys = ds.pair_keys(model.n_items)
        ok = ~np.isin(keys, train_keys)
        kept.append(ds.subset(ok))
        have += int(ok.sum())
        attempt += 1
    users = np.concatenate([d.users for d in kept])[:n_target]
    items = np.concatenate([d.items for d in kept])[:n_target]
    surf = np.concatenate([d.surfaces for d in kept])[:n_target]
    order = np.argsort(users, kind="stable")
    return Dataset(users[order], items[order], surf[order], split=Split.HOLDOUT,
                   surface_set=frozenset(Surface(s) for s in surfaces))


def make_corpora(model: LatentModel, cfg: GeneratorConfig) -> Corpora:
    """Broad multi-surface pre-train corpus plus a Homefeed-only downstream one."""
    all_surfaces = frozenset(Surface)
    homefeed = frozenset({Surface.HOMEFEED})
    n_down = cfg.n_downstream
    n_pre = cfg.n_pretrain
    pretrain = sample_events(model, cfg, n_pre, all_surfaces, stream=_STREAM_PRETRAIN)
    down = sample_events(model, cfg, n_down, homefeed, stream=_STREAM_DOWNSTREAM)
    frac = cfg.holdout_fraction
    down_hold = _holdout(model, cfg, down, max(1, round(frac * n_down)), homefeed,
                         _STREAM_DOWN_HOLDOUT)
    pre_hold = _holdout(model, cfg, pretrain, max(1, round(frac * n_pre)),
                        all_surfaces, _STREAM_PRE_HOLDOUT)
    return Corpora(pretrain, down, down_hold, pre_hold)


def downsample(ds: Dataset, rate: float, seed: int) -> Dataset:
    if not 0 < rate <= 1:
        raise InvalidArgument(f"rate must be in (0, 1], got {rate}")
    if rate == 1:
        return ds.subset(slice(None))
    keep = np.random.default_rng(seed).random(len(ds)) < rate
    return ds.subset(keep)


def summarize(ds: Dataset, n_items: int) -> str:
    """Plain-text counts per surface and an item-frequency histogram."""
    lines = [f"events {len(ds)}  split {ds.split.value}"]
    for s in Surface:
        lines.append(f"surface {s.name.lower()} {int(np.sum(ds.surfaces == s))}")
    freq = np.bincount(ds.items, minlength=n_items)
    seen = freq[freq > 0]
    lines.append(f"items_seen {seen.size}/{n_items}")
    edges = [1, 2, 3, 6, 11, 101, 1001]
    for lo, hi in zip(edges, edges[1:] + [None]):
        if hi is None:
            n = int(np.sum(seen >= lo))
            lines.append(f"freq >={lo} {n}")
        else:
            n = int(np.sum((seen >= lo) & (seen < hi)))
            lines.append(f"freq [{lo},{hi}) {n}")
    return "\n".join(lines) + "\n"
