"""Per-sample confidence scores used to rank test samples.

Every :class:`ScoreVector` is oriented so that a higher value means more
confidence that the base model is right. Uncertainty measures (entropy,
mutual information, predicted error) are negated when the vector is built.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._rng import make_rng
from .model import TrainedModel, predict

ROW_TOL = 1e-6


class ScoreError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScoreVector:
    method: str
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(v)):
            raise ScoreError(f"non-finite score in {self.method!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 1:
        raise ScoreError(f"expected an N x K probability matrix, got shape {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > ROW_TOL):
        raise ScoreError("probability rows must be nonnegative and sum to 1")
    return p


def _check_stack(stacked) -> np.ndarray:
    s = np.asarray(stacked, dtype=np.float64)
    if s.ndim != 3 or s.shape[0] < 1:
        raise ScoreError(f"expected a T x N x K stack, got shape {s.shape}")
    for t in range(s.shape[0]):
        _check_probs(s[t])
    return s


def neg_entropy(p: np.ndarray) -> np.ndarray:
    """Row-wise ``sum_k p log p`` with ``0 log 0 = 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def score_random(n: int, seed: int) -> ScoreVector:
    if n < 1:
        raise ScoreError("n must be >= 1")
    return ScoreVector("random", make_rng(seed).random(n))


def score_sr(probs) -> ScoreVector:
    """Softmax response: the largest class probability."""
    return ScoreVector("sr", _check_probs(probs).max(axis=1))


def score_entropy(probs) -> ScoreVector:
    return ScoreVector("entropy", neg_entropy(_check_probs(probs)))


def score_energy(logits, temperature: float = 1.0) -> ScoreVector:
    """Negative free energy ``T * logsumexp(logits / T)``."""
    if not temperature > 0:
        raise ScoreError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or not np.all(np.isfinite(z)):
        raise ScoreError("logits must be a finite N x K matrix")
    z = z / temperature
    m = z.max(axis=1)
    return ScoreVector("energy", temperature * (m + np.log(np.exp(z - m[:, None]).sum(axis=1))))


def score_mc_dropout(stacked) -> ScoreVector:
    """Negative entropy of the mean predictive distribution over the passes."""
    s = _check_stack(stacked)
    return ScoreVector("mc-dropout", neg_entropy(s.mean(axis=0)))


def score_bald(stacked) -> ScoreVector:
    """Negative mutual information between prediction and dropout mask."""
    s = _check_stack(stacked)
    predictive = -neg_entropy(s.mean(axis=0))
    expected = -neg_entropy(s).mean(axis=0)
    mi = np.maximum(predictive - expected, 0.0)
    # identical passes carry no information; pin to zero against rounding
    mi[np.all(s == s[:1], axis=(0, 2))] = 0.0
    return ScoreVector("bald", -mi)


def score_mc_regression(stacked) -> ScoreVector:
    """Negative variance of scalar predictions across dropout passes."""
    s = np.asarray(stacked, dtype=np.float64)
    s = s.reshape(s.shape[0], s.shape[1], -1)[:, :, 0]
    return ScoreVector("mc-dropout", -s.var(axis=0))


def score_mc_segmentation(stacked) -> ScoreVector:
    """Negative mean per-pixel binary entropy of the pass-averaged foreground probability."""
    q = np.asarray(stacked, dtype=np.float64).mean(axis=0)
    both = np.stack([q, 1.0 - q], axis=-1)
    return ScoreVector("mc-dropout", neg_entropy(both).mean(axis=1))


def score_ddu(test_features, train_features, train_labels, ridge: float = 1e-6) -> ScoreVector:
    """Log density of a class-conditional diagonal Gaussian mixture fit on the inputs.

    One Gaussian per class with per-feature variances floored at ``ridge``;
    mixture weights are the empirical class frequencies.
    """
    if not ridge > 0:
        raise ScoreError("ridge must be positive")
    x = np.asarray(test_features, dtype=np.float64)
    xt = np.asarray(train_features, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    classes, counts = np.unique(y, return_counts=True)
    if np.any(counts < 2):
        raise ScoreError("every class needs at least two training samples")
    comps = []
    for c, count in zip(classes, counts):
        xc = xt[y == c]
        mu = xc.mean(axis=0)
        var = np.maximum(xc.var(axis=0), ridge)
        log_norm = -0.5 * np.sum(np.log(2 * np.pi * var))
        comps.append(np.log(count / len(y)) + log_norm - 0.5 * np.sum((x - mu) ** 2 / var, axis=1))
    comps = np.stack(comps, axis=1)
    m = comps.max(axis=1)
    return ScoreVector("ddu", m + np.log(np.exp(comps - m[:, None]).sum(axis=1)))


def score_metaerr(meta_model: TrainedModel, test_features, kind: str = "binary-correctness") -> ScoreVector:
    """Meta-model confidence: ``p(correct)``, minus predicted error, or predicted IoU."""
    head = meta_model.spec.head
    expected = "sigmoid" if kind == "binary-correctness" else "scalar"
    if head != expected or meta_model.spec.n_out != 1:
        raise ScoreError(f"meta-label kind {kind!r} needs a one-unit {expected!r} head, got {head!r}")
    out = predict(meta_model, test_features)
    if kind == "binary-correctness":
        return ScoreVector("metaerr", out.probs[:, 0])
    if kind == "absolute-error":
        return ScoreVector("metaerr", -out.values)
    return ScoreVector("metaerr", out.values)


def combine_average(a: ScoreVector, b: ScoreVector, method: str | None = None) -> ScoreVector:
    """Mean of two probability-scale scores; tagged ``<a>+<b>`` unless ``method`` is given."""
    if len(a) != len(b):
        raise ScoreError(f"length mismatch: {len(a)} vs {len(b)}")
    for s in (a, b):
        if np.any((s.values < 0) | (s.values > 1)):
            raise ScoreError(f"{s.method!r} scores are not on a [0, 1] scale")
    return ScoreVector(method or f"{a.method}+{b.method}", (a.values + b.values) / 2)


def save_scores_csv(scores: list[ScoreVector], path, ids=None) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "method", "value"])
        for s in scores:
            for i, v in zip(range(len(s)) if ids is None else ids, s.values):
                writer.writerow([i, s.method, repr(float(v))])
