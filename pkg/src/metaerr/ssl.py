"""Curriculum pseudo-labeling driven by a meta-model.

The labeled set is halved: one half trains the base model, the other half is
a probe on which the meta-model learns where the base model errs. Each round
the base model is retrained on its half plus every pseudo-labeled sample
accepted so far, the meta-model is rebuilt against it, and the unlabeled
samples the meta-model trusts most are appended with the base model's
predicted labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import derive_seed, make_rng
from .adr import rank_by_confidence
from .data import Dataset, make_split
from .metalabel import build_meta_dataset, meta_labels_classification
from .model import LayerSpec, TrainConfig, TrainedModel, predict, train
from .scores import ScoreVector, score_metaerr, score_random, score_sr

SELECTIONS = ("metaerr", "random", "sr-threshold")


class SslError(ValueError):
    pass


@dataclass(frozen=True)
class SslConfig:
    base_spec: LayerSpec
    base_train: TrainConfig
    meta_spec: LayerSpec
    meta_train: TrainConfig
    rounds: int = 5
    per_round_fraction: float = 0.2
    selection: str = "metaerr"
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.rounds < 1:
            raise SslError("rounds must be >= 1")
        if not 0.0 < self.per_round_fraction <= 1.0:
            raise SslError("per_round_fraction must lie in (0, 1]")
        if self.rounds * self.per_round_fraction > 1.0 + 1e-12:
            raise SslError("rounds * per_round_fraction exceeds the unlabeled pool")
        if self.selection not in SELECTIONS:
            raise SslError(f"unknown selection {self.selection!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise SslError("test_fraction must lie in (0, 1)")

    @classmethod
    def from_experiment(cls, cfg, seed: int) -> "SslConfig":
        opts = dict(cfg.ssl)
        opts.pop("labeled_frac", None)
        return cls(
            base_spec=cfg.base_spec,
            base_train=cfg.base_train,
            meta_spec=cfg.meta_spec,
            meta_train=cfg.meta_train,
            seed=seed,
            **opts,
        )


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round: int
    labeled_size: int
    appended: int
    pseudo_correct_rate: float
    top1: float
    top5: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class SslState:
    round: int
    labeled_idx: np.ndarray
    labeled_y: np.ndarray
    unlabeled_idx: np.ndarray
    meta_idx: np.ndarray
    test_idx: np.ndarray
    pool_size: int
    base_model: TrainedModel | None = None
    meta_model: TrainedModel | None = None
    trace: tuple[RoundRecord, ...] = ()

    def __post_init__(self):
        if np.intersect1d(self.labeled_idx, self.unlabeled_idx).size:
            raise SslError("labeled and unlabeled sets overlap")
        if len(self.labeled_idx) != len(self.labeled_y):
            raise SslError("every labeled index needs a label")


@dataclass(frozen=True, eq=False)
class SslResult:
    model: TrainedModel
    trace: tuple[RoundRecord, ...]
    final_top1: float
    final_top5: float
    selection: str

    def to_dict(self) -> dict:
        return {
            "selection": self.selection,
            "final_top1": self.final_top1,
            "final_top5": self.final_top5,
            "rounds": [r.to_dict() for r in self.trace],
        }


def split_labeled_halves(labeled_idx, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle and halve; the base half takes the odd one out."""
    idx = np.asarray(labeled_idx, dtype=np.int64)
    if idx.size < 2:
        raise SslError("need at least two labeled samples to halve")
    perm = idx[make_rng(seed).permutation(idx.size)]
    cut = (idx.size + 1) // 2
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def pseudo_label(base_model: TrainedModel, unlabeled_features) -> np.ndarray:
    if base_model.spec.head != "softmax":
        raise SslError("pseudo-labeling needs a softmax classifier")
    return predict(base_model, unlabeled_features).labels


def select_by_meta(meta_scores: ScoreVector, k: int) -> np.ndarray:
    """Positions of the ``k`` highest-scoring samples, best first."""
    if not 0 <= k <= len(meta_scores):
        raise SslError(f"cannot select {k} of {len(meta_scores)} samples")
    return rank_by_confidence(meta_scores)[:k]


def topk_accuracy(probs, labels, k: int) -> float:
    """Share of rows whose true class ranks among the ``k`` most probable.

    Equal probabilities rank the lower class index first.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if not 1 <= k <= p.shape[1]:
        raise SslError(f"k must lie in [1, {p.shape[1]}]")
    true_p = p[np.arange(len(y)), y][:, None]
    cls = np.arange(p.shape[1])[None, :]
    rank = np.sum((p > true_p) | ((p == true_p) & (cls < y[:, None])), axis=1)
    return float(np.mean(rank < k))


def _train_on(dataset: Dataset, idx, labels, spec: LayerSpec, cfg: TrainConfig) -> TrainedModel:
    view = Dataset(dataset.features[idx], labels, "classification", n_classes=dataset.n_classes)
    return train(view, np.arange(len(idx)), spec, cfg)


def _evaluate(model: TrainedModel, dataset: Dataset, test_idx) -> tuple[float, float]:
    probs = predict(model, dataset.features[test_idx]).probs
    y = dataset.labels[test_idx]
    return topk_accuracy(probs, y, 1), topk_accuracy(probs, y, min(5, probs.shape[1]))


def ssl_round(state: SslState, config: SslConfig, dataset: Dataset, scorer=None) -> SslState:
    """One train / score / append round.

    ``scorer(base_model, unlabeled_idx)``, when given, replaces the selection
    score; it must return a :class:`ScoreVector` over ``unlabeled_idx``.
    """
    if state.unlabeled_idx.size == 0:
        raise SslError("no unlabeled samples left")
    t = state.round
    base = _train_on(
        dataset, state.labeled_idx, state.labeled_y, config.base_spec,
        replace(config.base_train, seed=derive_seed(config.seed, 100, t)),
    )
    unl_x = dataset.features[state.unlabeled_idx]
    meta = None
    if scorer is not None:
        scores = scorer(base, state.unlabeled_idx)
    elif config.selection == "metaerr":
        meta_x = dataset.features[state.meta_idx]
        meta_labels = meta_labels_classification(predict(base, meta_x).labels, dataset.labels[state.meta_idx])
        meta_ds = build_meta_dataset(meta_x, meta_labels)
        meta = train(meta_ds, np.arange(len(meta_ds)), config.meta_spec,
                     replace(config.meta_train, seed=derive_seed(config.seed, 101, t)))
        scores = score_metaerr(meta, unl_x)
    elif config.selection == "random":
        scores = score_random(len(unl_x), derive_seed(config.seed, 102, t))
    else:
        scores = score_sr(predict(base, unl_x).probs)
    k = max(1, int(np.floor(config.per_round_fraction * state.pool_size + 1e-9)))
    k = min(k, state.unlabeled_idx.size)
    chosen = select_by_meta(scores, k)
    new_idx = state.unlabeled_idx[chosen]
    new_y = pseudo_label(base, unl_x[chosen])
    top1, top5 = _evaluate(base, dataset, state.test_idx)
    record = RoundRecord(
        round=t + 1,
        labeled_size=len(state.labeled_idx) + k,
        appended=k,
        pseudo_correct_rate=float(np.mean(new_y == dataset.labels[new_idx])),
        top1=top1,
        top5=top5,
    )
    return SslState(
        round=t + 1,
        labeled_idx=np.concatenate([state.labeled_idx, new_idx]),
        labeled_y=np.concatenate([state.labeled_y, new_y]),
        unlabeled_idx=np.delete(state.unlabeled_idx, chosen),
        meta_idx=state.meta_idx,
        test_idx=state.test_idx,
        pool_size=state.pool_size,
        base_model=base,
        meta_model=meta,
        trace=state.trace + (record,),
    )


def initial_state(dataset: Dataset, labeled_frac: float, config: SslConfig) -> SslState:
    if dataset.task != "classification":
        raise SslError("pseudo-labeling needs a classification dataset")
    if not 0.0 < labeled_frac < 1.0:
        raise SslError("labeled_frac must lie in (0, 1)")
    keep = 1.0 - config.test_fraction
    split = make_split(dataset, (keep * (1 - labeled_frac), keep * labeled_frac, config.test_fraction),
                       config.seed)
    base_half, meta_half = split_labeled_halves(split.probe_idx, derive_seed(config.seed, 99))
    return SslState(
        round=0,
        labeled_idx=base_half,
        labeled_y=dataset.labels[base_half].copy(),
        unlabeled_idx=split.train_idx.copy(),
        meta_idx=meta_half,
        test_idx=split.test_idx,
        pool_size=len(split.train_idx),
    )


def run_ssl(dataset: Dataset, labeled_frac: float, config: SslConfig, on_round=None) -> SslResult:
    """Run ``config.rounds`` rounds, then fit the final model on everything accepted.

    Each trace entry reports the base model trained at the start of that
    round; ``final_top1``/``final_top5`` belong to the model fit after the
    last round's samples were appended. ``on_round(state)`` is called after
    every round.
    """
    state = initial_state(dataset, labeled_frac, config)
    for _ in range(config.rounds):
        state = ssl_round(state, config, dataset)
        if on_round is not None:
            on_round(state)
    final = _train_on(
        dataset, state.labeled_idx, state.labeled_y, config.base_spec,
        replace(config.base_train, seed=derive_seed(config.seed, 100, config.rounds)),
    )
    top1, top5 = _evaluate(final, dataset, state.test_idx)
    return SslResult(final, state.trace, top1, top5, config.selection)
