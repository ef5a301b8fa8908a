"""Stage-1 pre-training, Stage-2 downstream training, and the four-arm ablation.

Arms:

* ``baseline``       downstream model with fresh, trainable embeddings
* ``single_stage``   as baseline, plus the contrastive loss folded into the
                     downstream objective (no broad pre-train corpus)
* ``two_stage_frozen``     pre-trained embeddings, kept fixed downstream
* ``two_stage_finetune``   pre-trained embeddings, trained further downstream
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core_types import Dataset, EmbeddingTable, IdKind, IdSpace, InvalidArgument, Split, new_table
from .datagen import Corpora, GeneratorConfig, build_latent_model, make_corpora
from .evaluation import (
    EpochMetrics,
    Stage,
    auc,
    hit_at_k_from_scores,
    logloss,
    sample_candidates,
)
from .loss_grad import (
    Temperature,
    assemble_batch,
    bce_forward_backward,
    bce_with_logits,
    contrastive_backward,
    contrastive_forward,
)
from .models import (
    DownstreamModel,
    EmbeddingMode,
    TwoTowerModel,
    ctr_backward,
    ctr_forward,
    ctr_logits,
)
from .optimizers import (
    DenseAdamState,
    SparseAdagradState,
    dense_adam_step,
    sparse_adagrad_step,
)

log = logging.getLogger(__name__)


class Arm(enum.Enum):
    BASELINE = "baseline"
    SINGLE_STAGE = "single_stage"
    TWO_STAGE_FROZEN = "two_stage_frozen"
    TWO_STAGE_FINETUNE = "two_stage_finetune"


ARM_ORDER = [Arm.SINGLE_STAGE, Arm.BASELINE, Arm.TWO_STAGE_FROZEN, Arm.TWO_STAGE_FINETUNE]


class PretrainLoss(enum.Enum):
    CONTRASTIVE = "contrastive"
    BCE = "bce"


# rng substreams, combined with the run seed
_S_INIT = 21
_S_SHUFFLE = 22
_S_NEG = 23
_S_EVAL = 24
_S_MLP = 25
_S_CTR_NEG = 26


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    dim: int = 8
    init_scale: float = 1.0
    batch_size: int = 32
    n_uniform_negatives: int = 2048
    bce_negatives: int = 4
    embed_lr: float = 0.3
    embed_eps: float = 1e-10
    embed_weight_decay: float = 0.0
    downstream_embed_lr: float = 0.01
    mlp_lr: float = 1e-3
    temp_lr: float = 1e-3
    tau_init: float = 1.0
    tau_min: float = 0.01
    tau_max: float = 10.0
    hidden: Tuple[int, int] = (64, 32)
    pretrain_epochs: int = 5
    downstream_epochs: int = 5
    arm: Arm = Arm.TWO_STAGE_FINETUNE
    pretrain_loss: PretrainLoss = PretrainLoss.CONTRASTIVE
    single_stage_lambda: float = 1.0
    k: int = 3
    n_candidates: int = 100
    overfit_threshold: float = 0.005
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.pretrain_epochs < 1 or self.downstream_epochs < 1:
            raise InvalidArgument("epochs must be >= 1")
        if len(self.seeds) < 1:
            raise InvalidArgument("at least one seed is required")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")

    def for_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, generator=self.generator.with_seed(seed), seeds=(seed,))

    @property
    def seed(self) -> int:
        return self.seeds[0]


def _rng(cfg: ExperimentConfig, stream: int, *extra) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream, *extra])


def build_corpora(cfg: ExperimentConfig) -> Corpora:
    gen = cfg.generator.with_seed(cfg.seed)
    return make_corpora(build_latent_model(gen), gen)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalSet:
    """Holdout positives with fixed candidate lists and fixed negative labels."""

    users: np.ndarray
    candidates: np.ndarray  # (n, n_candidates), positive in column 0
    ll_users: np.ndarray  # rows for AUC / logloss
    ll_items: np.ndarray
    ll_labels: np.ndarray

    @classmethod
    def build(cls, holdout: Dataset, n_items: int, cfg: ExperimentConfig, tag: int):
        users = holdout.users.astype(np.int64)
        items = holdout.items.astype(np.int64)
        cands = sample_candidates(items, n_items, cfg.n_candidates, seed=cfg.seed * 1000 + tag)
        rng = _rng(cfg, _S_EVAL, tag)
        k = cfg.bce_negatives
        neg = rng.integers(0, n_items, size=(len(users), k))
        ll_users = np.repeat(users, k + 1)
        ll_items = np.concatenate([items[:, None], neg], axis=1).reshape(-1)
        labels = np.tile(np.r_[1, np.zeros(k, dtype=np.int64)], len(users))
        return cls(users, cands, ll_users, ll_items, labels)


def _evaluate(scorer, es: EvalSet, cfg: ExperimentConfig, arm: str, stage: Stage,
              epoch: int, chunk: int = 2048) -> EpochMetrics:
    hits = 0.0
    n = len(es.users)
    for lo in range(0, n, chunk):
        c = es.candidates[lo : lo + chunk]
        u = np.broadcast_to(es.users[lo : lo + chunk, None], c.shape)
        hits += hit_at_k_from_scores(scorer(u, c), cfg.k) * len(c)
    s = np.concatenate([
        scorer(es.ll_users[lo : lo + 8 * chunk], es.ll_items[lo : lo + 8 * chunk])
        for lo in range(0, len(es.ll_users), 8 * chunk)
    ])
    return EpochMetrics(
        arm=arm, stage=stage, epoch=epoch, split=Split.HOLDOUT,
        hit_at_k=hits / max(n, 1), auc=auc(s, es.ll_labels),
        logloss=logloss(s, es.ll_labels), seed=cfg.seed, k=cfg.k,
    )


def _tower_scorer(model: TwoTowerModel):
    U, P = model.user_table.rows, model.item_table.rows

    def score(users, items):
        return np.einsum("...j,...j->...", U[users], P[items], dtype=np.float64)

    return score


def _ctr_scorer(model: DownstreamModel):
    return lambda users, items: ctr_logits(model, users, items)


# ---------------------------------------------------------------- stage 1


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo : lo + batch_size]


def pretrain_steps_per_epoch(n_events: int, batch_size: int) -> int:
    return math.ceil(n_events / batch_size)


def run_pretrain(
    cfg: ExperimentConfig,
    corpora: Corpora,
    eval_set: Optional[EvalSet] = None,
    arm: str = "pretrain",
) -> Tuple[TwoTowerModel, List[EpochMetrics]]:
    """Train the two-tower model on the broad corpus for ``pretrain_epochs`` passes."""
    data = corpora.pretrain
    if len(data) == 0:
        raise InvalidArgument("pre-train corpus is empty")
    gen = cfg.generator
    model = TwoTowerModel.init(gen.n_users, gen.n_items, cfg.dim, cfg.init_scale,
                               seed=cfg.seed * 100 + _S_INIT)
    model.temp = Temperature.from_tau(cfg.tau_init, cfg.tau_min, cfg.tau_max)
    uopt = SparseAdagradState.for_table(model.user_table, cfg.embed_lr, cfg.embed_eps)
    iopt = SparseAdagradState.for_table(model.item_table, cfg.embed_lr, cfg.embed_eps)
    theta = np.array([model.temp.theta])
    topt = DenseAdamState.for_params([theta], lr=cfg.temp_lr)
    if eval_set is None:
        eval_set = EvalSet.build(corpora.pretrain_holdout, gen.n_items, cfg, tag=1)

    users_all = data.users.astype(np.int64)
    items_all = data.items.astype(np.int64)
    shuffle = _rng(cfg, _S_SHUFFLE, 1)
    negs = _rng(cfg, _S_NEG, 1)
    metrics = [_evaluate(_tower_scorer(model), eval_set, cfg, arm, Stage.PRETRAIN, 0)]
    steps = 0
    for epoch in range(1, cfg.pretrain_epochs + 1):
        total = 0.0
        n_batches = 0
        for idx in _batches(len(data), cfg.batch_size, shuffle):
            u, i = users_all[idx], items_all[idx]
            if cfg.pretrain_loss is PretrainLoss.CONTRASTIVE:
                batch = assemble_batch(u, i, model.user_table, model.item_table,
                                       cfg.n_uniform_negatives, negs)
                loss, cache = contrastive_forward(batch, model.temp)
                g = contrastive_backward(cache)
                sparse_adagrad_step(model.user_table, uopt, u, g.d_user,
                                    cfg.embed_weight_decay)
                sparse_adagrad_step(model.item_table, iopt,
                                    np.concatenate([i, batch.uniform_neg_ids]),
                                    np.concatenate([g.d_pos, g.d_uniform_neg]),
                                    cfg.embed_weight_decay)
                dense_adam_step([theta], topt, [np.array([g.d_theta])])
                model.temp.theta = float(theta[0])
            else:
                k = cfg.bce_negatives
                neg = negs.integers(0, gen.n_items, size=(len(u), k))
                uu = np.repeat(u, k + 1)
                ii = np.concatenate([i[:, None], neg], axis=1).reshape(-1)
                y = np.tile(np.r_[1, np.zeros(k, dtype=np.int64)], len(u))
                loss, du, di = bce_forward_backward(
                    model.user_table.rows[uu], model.item_table.rows[ii], y
                )
                sparse_adagrad_step(model.user_table, uopt, uu, du, cfg.embed_weight_decay)
                sparse_adagrad_step(model.item_table, iopt, ii, di, cfg.embed_weight_decay)
            total += loss
            n_batches += 1
            steps += 1
        log.info("pretrain[%s] seed=%d epoch=%d loss=%.5f tau=%.4f", cfg.pretrain_loss.value,
                 cfg.seed, epoch, total / n_batches, model.temp.tau)
        metrics.append(_evaluate(_tower_scorer(model), eval_set, cfg, arm, Stage.PRETRAIN, epoch))
    model.steps = steps
    return model, metrics


# ---------------------------------------------------------------- stage 2


def _fresh_tables(cfg: ExperimentConfig) -> Tuple[EmbeddingTable, EmbeddingTable]:
    gen = cfg.generator
    base = cfg.seed * 100 + _S_INIT
    users = new_table(IdSpace(IdKind.USER, gen.n_users), cfg.dim, cfg.init_scale, seed=[base, 11])
    items = new_table(IdSpace(IdKind.ITEM, gen.n_items), cfg.dim, cfg.init_scale, seed=[base, 12])
    return users, items


def run_downstream(
    cfg: ExperimentConfig,
    corpora: Corpora,
    init: Optional[TwoTowerModel] = None,
    arm: Optional[Arm] = None,
    eval_set: Optional[EvalSet] = None,
    contrastive_weight: float = 0.0,
) -> Tuple[DownstreamModel, List[EpochMetrics]]:
    """Train the CTR model on the downstream corpus.

    ``baseline`` and ``single_stage`` must not be given a checkpoint; both
    two-stage arms require one.  The checkpoint tables are copied, so the
    caller's model is never modified.
    """
    arm = cfg.arm if arm is None else arm
    data = corpora.downstream_train
    if len(data) == 0:
        raise InvalidArgument("downstream corpus is empty")
    two_stage = arm in (Arm.TWO_STAGE_FROZEN, Arm.TWO_STAGE_FINETUNE)
    if two_stage and init is None:
        raise InvalidArgument(f"arm {arm.value} requires an init checkpoint")
    if not two_stage and init is not None:
        raise InvalidArgument(f"arm {arm.value} trains from scratch; do not pass a checkpoint")
    gen = cfg.generator
    if two_stage:
        if init.dim != cfg.dim:
            raise InvalidArgument(f"checkpoint dim {init.dim} != config dim {cfg.dim}")
        users, items = init.user_table.copy(), init.item_table.copy()
        users.frozen = items.frozen = False
        mode = EmbeddingMode.FROZEN if arm is Arm.TWO_STAGE_FROZEN else EmbeddingMode.FINETUNE
        elr = cfg.downstream_embed_lr
        temp = Temperature(init.temp.theta, init.temp.tau_min, init.temp.tau_max)
    else:
        users, items = _fresh_tables(cfg)
        mode = EmbeddingMode.SCRATCH
        elr = cfg.embed_lr
        temp = Temperature.from_tau(cfg.tau_init, cfg.tau_min, cfg.tau_max)
    model = DownstreamModel.init(users, items, cfg.hidden, mode, seed=[cfg.seed, _S_MLP])
    params = model.mlp.flat()
    mopt = DenseAdamState.for_params(params, lr=cfg.mlp_lr)
    trainable = mode is not EmbeddingMode.FROZEN
    uopt = SparseAdagradState.for_table(users, elr, cfg.embed_eps)
    iopt = SparseAdagradState.for_table(items, elr, cfg.embed_eps)
    theta = np.array([temp.theta])
    topt = DenseAdamState.for_params([theta], lr=cfg.temp_lr)
    tower = TwoTowerModel(users, items, temp)
    if eval_set is None:
        eval_set = EvalSet.build(corpora.downstream_holdout, gen.n_items, cfg, tag=2)

    users_all = data.users.astype(np.int64)
    items_all = data.items.astype(np.int64)
    shuffle = _rng(cfg, _S_SHUFFLE, 2)
    negs = _rng(cfg, _S_CTR_NEG, 2)
    # separate stream so the contrastive term never perturbs the BCE negatives
    cneg = _rng(cfg, _S_NEG, 3)
    k = cfg.bce_negatives
    pattern = np.r_[1, np.zeros(k, dtype=np.int64)]
    name = arm.value
    metrics = [_evaluate(_ctr_scorer(model), eval_set, cfg, name, Stage.DOWNSTREAM, 0)]
    step_losses = []  # (bce, contrastive) per step
    for epoch in range(1, cfg.downstream_epochs + 1):
        total = 0.0
        n_batches = 0
        for idx in _batches(len(data), cfg.batch_size, shuffle):
            u, i = users_all[idx], items_all[idx]
            # negatives re-sampled every epoch
            neg = negs.integers(0, gen.n_items, size=(len(u), k))
            uu = np.repeat(u, k + 1)
            ii = np.concatenate([i[:, None], neg], axis=1).reshape(-1)
            y = np.tile(pattern, len(u))
            logits, cache = ctr_forward(model, uu, ii)
            loss, dlogit = bce_with_logits(logits, y)
            grads = ctr_backward(cache, dlogit)
            u_ids, u_g = uu, grads.d_user_rows
            i_ids, i_g = ii, grads.d_item_rows
            bce_loss, closs = loss, 0.0
            if contrastive_weight or arm is Arm.SINGLE_STAGE:
                w = contrastive_weight
                batch = assemble_batch(u, i, users, items, cfg.n_uniform_negatives, cneg)
                closs, ccache = contrastive_forward(batch, tower.temp)
                cg = contrastive_backward(ccache)
                loss += w * closs
                u_ids = np.concatenate([u_ids, u])
                u_g = np.concatenate([u_g, w * cg.d_user])
                i_ids = np.concatenate([i_ids, i, batch.uniform_neg_ids])
                i_g = np.concatenate([i_g, w * cg.d_pos, w * cg.d_uniform_neg])
                if trainable and w:
                    dense_adam_step([theta], topt, [np.array([w * cg.d_theta])])
                    tower.temp.theta = float(theta[0])
            step_losses.append((bce_loss, closs))
            dense_adam_step(params, mopt, grads.mlp.flat())
            if trainable:
                sparse_adagrad_step(users, uopt, u_ids, u_g, cfg.embed_weight_decay)
                sparse_adagrad_step(items, iopt, i_ids, i_g, cfg.embed_weight_decay)
            total += loss
            n_batches += 1
        log.info("downstream[%s] seed=%d epoch=%d loss=%.5f", name, cfg.seed, epoch,
                 total / n_batches)
        metrics.append(_evaluate(_ctr_scorer(model), eval_set, cfg, name, Stage.DOWNSTREAM, epoch))
    model.step_losses = step_losses
    return model, metrics


def run_single_stage(
    cfg: ExperimentConfig,
    corpora: Corpora,
    eval_set: Optional[EvalSet] = None,
    lam: Optional[float] = None,
) -> Tuple[DownstreamModel, List[EpochMetrics]]:
    """Downstream data only, objective BCE + lam * contrastive."""
    lam = cfg.single_stage_lambda if lam is None else lam
    return run_downstream(cfg, corpora, None, Arm.SINGLE_STAGE, eval_set, contrastive_weight=lam)


# ---------------------------------------------------------------- ablation


@dataclass
class SeedResult:
    seed: int
    final_hit: Dict[str, float]
    metrics: Dict[str, List[EpochMetrics]]
    checkpoint: TwoTowerModel
    corpora: Optional[Corpora] = None


@dataclass
class AblationReport:
    seeds: List[int]
    per_seed: List[SeedResult]

    def final(self, arm: Arm) -> np.ndarray:
        return np.array([r.final_hit[arm.value] for r in self.per_seed])

    def lifts(self, arm: Arm) -> np.ndarray:
        base = self.final(Arm.BASELINE)
        return (self.final(arm) - base) / base

    def summary(self) -> Dict[str, dict]:
        out = {}
        for arm in ARM_ORDER:
            hit = self.final(arm)
            lift = self.lifts(arm)
            ddof = 1 if len(hit) > 1 else 0
            out[arm.value] = {
                "hit_mean": float(hit.mean()),
                "hit_std": float(hit.std(ddof=ddof)),
                "lift_mean": float(lift.mean()),
                "lift_std": float(lift.std(ddof=ddof)),
            }
        return out

    def table(self) -> str:
        lines = [f"{'arm':<22}{'hit@k mean':>12}{'std':>10}{'lift':>10}{'std':>10}"]
        for arm, s in self.summary().items():
            lines.append(
                f"{arm:<22}{s['hit_mean']:>12.5f}{s['hit_std']:>10.5f}"
                f"{100 * s['lift_mean']:>+9.3f}%{100 * s['lift_std']:>9.3f}%"
            )
        return "\n".join(lines) + "\n"

    def all_metrics(self) -> List[EpochMetrics]:
        return [m for r in self.per_seed for series in r.metrics.values() for m in series]


def run_seed(cfg: ExperimentConfig, seed: int, keep_corpora: bool = False) -> SeedResult:
    scfg = cfg.for_seed(seed)
    corpora = build_corpora(scfg)
    gen = scfg.generator
    down_eval = EvalSet.build(corpora.downstream_holdout, gen.n_items, scfg, tag=2)
    ckpt, pre_metrics = run_pretrain(scfg, corpora)
    metrics = {"pretrain": pre_metrics}
    final = {}
    for arm in [Arm.BASELINE, Arm.SINGLE_STAGE, Arm.TWO_STAGE_FROZEN, Arm.TWO_STAGE_FINETUNE]:
        if arm is Arm.SINGLE_STAGE:
            _, m = run_single_stage(scfg, corpora, down_eval)
        elif arm is Arm.BASELINE:
            _, m = run_downstream(scfg, corpora, None, arm, down_eval)
        else:
            _, m = run_downstream(scfg, corpora, ckpt, arm, down_eval)
        metrics[arm.value] = m
        final[arm.value] = m[-1].hit_at_k
    return SeedResult(seed, final, metrics, ckpt, corpora if keep_corpora else None)


def run_ablation(cfg: ExperimentConfig, seeds=None) -> AblationReport:
    seeds = list(cfg.seeds if seeds is None else seeds)
    if len(seeds) < 2:
        raise InvalidArgument("ablation needs >= 2 seeds for a standard deviation")
    return AblationReport(seeds, [run_seed(cfg, s) for s in seeds])
