"""Metric-vs-declaration-rate tables.

Test samples are sorted by descending confidence; at declaration rate ``d``
the first ``ceil(d * N)`` samples are kept and the task metric is averaged
over them. Per-sample metrics are correctness (0/1) for accuracy, squared
error for MSE and IoU for mIoU.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scores import ScoreVector

METRICS = ("accuracy", "mse", "miou")
DEFAULT_RATES = tuple(round(0.1 * i, 1) for i in range(1, 11))


class AdrError(ValueError):
    pass


def higher_is_better(metric: str) -> bool:
    if metric not in METRICS:
        raise AdrError(f"unknown metric {metric!r}")
    return metric != "mse"


def rank_by_confidence(scores: ScoreVector | Sequence[float]) -> np.ndarray:
    """Indices by descending score; equal scores keep ascending index order."""
    v = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    if np.any(np.isnan(v)):
        raise AdrError("NaN score")
    return np.argsort(-v, kind="stable")


def prefix_size(d: float, n: int) -> int:
    """``ceil(d * n)``, ignoring float noise such as ``0.7 * 10 = 7.000000000000001``."""
    if not 0.0 < d <= 1.0:
        raise AdrError(f"declaration rate must lie in (0, 1], got {d}")
    return max(1, math.ceil(round(d * n, 9)))


def metric_at_dr(perm, per_sample_metric, d: float) -> float:
    """Mean of ``per_sample_metric`` over the first ``ceil(d * N)`` entries of ``perm``.

    The sum is exactly rounded, so the full-declaration value does not depend
    on the order of ``perm``.
    """
    m = np.asarray(per_sample_metric, dtype=np.float64)
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != m.shape:
        raise AdrError("permutation and metric lengths differ")
    k = prefix_size(d, m.size)
    return math.fsum(m[perm[:k]]) / k


@dataclass(frozen=True, eq=False)
class AdrTable:
    rates: tuple[float, ...]
    methods: tuple[str, ...]
    values: np.ndarray
    metric: str
    n_test: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != (len(self.methods), len(self.rates)):
            raise AdrError("values must be a methods x rates matrix")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        object.__setattr__(self, "methods", tuple(self.methods))

    def row(self, method: str) -> np.ndarray:
        return self.values[self.methods.index(method)]

    def at(self, method: str, rate: float) -> float:
        j = int(np.argmin(np.abs(np.asarray(self.rates) - rate)))
        return float(self.values[self.methods.index(method), j])

    def to_csv(self, path, transposed: bool = False) -> None:
        """Rates as rows and methods as columns (``transposed`` flips that)."""
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if not transposed:
                writer.writerow(["rate", *self.methods])
                for j, r in enumerate(self.rates):
                    writer.writerow([repr(float(r)), *(repr(float(v)) for v in self.values[:, j])])
            else:
                writer.writerow(["method", *(repr(float(r)) for r in self.rates)])
                for i, m in enumerate(self.methods):
                    writer.writerow([m, *(repr(float(v)) for v in self.values[i])])

    @classmethod
    def from_csv(cls, path, metric: str, n_test: int) -> "AdrTable":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        methods = tuple(rows[0][1:])
        rates = tuple(float(r[0]) for r in rows[1:])
        values = np.array([[float(c) for c in r[1:]] for r in rows[1:]]).T
        return cls(rates, methods, values, metric, n_test)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "n_test": self.n_test,
            "rates": list(self.rates),
            "methods": list(self.methods),
            "values": {m: [float(v) for v in self.values[i]] for i, m in enumerate(self.methods)},
            "meta": self.meta,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def adr_curve(
    score_sets: Sequence[ScoreVector],
    per_sample_metric,
    rates: Sequence[float] = DEFAULT_RATES,
    metric: str = "accuracy",
) -> AdrTable:
    higher_is_better(metric)
    m = np.asarray(per_sample_metric, dtype=np.float64)
    if not score_sets:
        raise AdrError("need at least one score vector")
    for s in score_sets:
        if len(s) != m.size:
            raise AdrError(f"{s.method!r} has {len(s)} scores for {m.size} samples")
    values = np.empty((len(score_sets), len(rates)))
    for i, s in enumerate(score_sets):
        perm = rank_by_confidence(s)
        for j, d in enumerate(rates):
            values[i, j] = metric_at_dr(perm, m, d)
    return AdrTable(tuple(rates), tuple(s.method for s in score_sets), values, metric, m.size)


def oracle_score(per_sample_metric, metric: str = "accuracy") -> ScoreVector:
    """Hindsight ranking: best per-sample metric first."""
    m = np.asarray(per_sample_metric, dtype=np.float64)
    return ScoreVector("oracle", m if higher_is_better(metric) else -m)


def aggregate_tables(tables: Sequence[AdrTable]) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sample standard deviation (``ddof=1``) across same-shaped tables."""
    stack = np.stack([t.values for t in tables])
    std = stack.std(axis=0, ddof=1) if len(tables) > 1 else np.zeros_like(stack[0])
    return stack.mean(axis=0), std
