"""Meta-labels describing how well a frozen base model did on each probe sample."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset

KINDS = ("binary-correctness", "absolute-error", "iou")


class MetaLabelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MetaLabels:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MetaLabelError(f"unknown meta-label kind {self.kind!r}")
        v = np.array(self.values, dtype=np.float64).ravel()
        if self.kind == "binary-correctness" and not np.all((v == 0) | (v == 1)):
            raise MetaLabelError("binary-correctness values must be 0 or 1")
        if self.kind == "absolute-error" and np.any(v < 0):
            raise MetaLabelError("absolute errors must be nonnegative")
        if self.kind == "iou" and np.any((v < 0) | (v > 1)):
            raise MetaLabelError("IoU values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


def _pair(a, b, dtype=None) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=dtype)
    b = np.asarray(b, dtype=dtype)
    if a.shape[:1] != b.shape[:1]:
        raise MetaLabelError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def meta_labels_classification(pred_labels, true_labels) -> MetaLabels:
    """1 where the base model's class matches the ground truth, else 0."""
    pred, true = _pair(pred_labels, true_labels, np.int64)
    return MetaLabels((pred == true).astype(np.float64), "binary-correctness")


def meta_labels_regression(pred, true) -> MetaLabels:
    pred, true = _pair(pred, true, np.float64)
    return MetaLabels(np.abs(true - pred), "absolute-error")


def iou(mask_a, mask_b) -> float:
    """Intersection over union of two binary masks; two empty masks give 1.0."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise MetaLabelError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def meta_labels_segmentation(pred_masks, true_masks) -> MetaLabels:
    pred, true = _pair(pred_masks, true_masks)
    if pred.shape != true.shape:
        raise MetaLabelError(f"mask shape mismatch: {pred.shape} vs {true.shape}")
    a = pred.reshape(len(pred), -1).astype(bool)
    b = true.reshape(len(true), -1).astype(bool)
    inter = np.count_nonzero(a & b, axis=1)
    union = np.count_nonzero(a | b, axis=1)
    safe = np.maximum(union, 1)
    return MetaLabels(np.where(union == 0, 1.0, inter / safe), "iou")


def build_meta_dataset(probe_features, meta: MetaLabels) -> Dataset:
    """Pair probe inputs with their meta-labels.

    Binary correctness becomes a two-class classification set (train with a
    one-unit sigmoid head and ``meta-bce``); absolute error and IoU become
    regression sets (scalar head, ``mse``).
    """
    x = np.asarray(probe_features, dtype=np.float64)
    if x.shape[0] != len(meta):
        raise MetaLabelError(f"{x.shape[0]} probe rows but {len(meta)} meta-labels")
    if meta.kind == "binary-correctness":
        return Dataset(x, meta.values.astype(np.int64), "classification", n_classes=2)
    return Dataset(x, meta.values, "regression")


def meta_loss_for(kind: str) -> str:
    return "meta-bce" if kind == "binary-correctness" else "mse"


def meta_head_for(kind: str) -> str:
    return "sigmoid" if kind == "binary-correctness" else "scalar"


def save_meta_labels_csv(meta: MetaLabels, path, ids=None) -> None:
    ids = range(len(meta)) if ids is None else ids
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "meta_value", "kind"])
        for i, v in zip(ids, meta.values):
            writer.writerow([i, repr(float(v)), meta.kind])
